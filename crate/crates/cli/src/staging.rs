//! Directory outputs are assembled in a hidden sibling directory and renamed
//! into place only when the command succeeds.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub struct StagedDir {
    target: PathBuf,
    tmp: tempfile::TempDir,
}

impl StagedDir {
    pub fn new(target: &Path) -> Result<Self> {
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let tmp = tempfile::Builder::new()
            .prefix(".dacse-staging-")
            .tempdir_in(&parent)
            .with_context(|| format!("staging directory in {}", parent.display()))?;
        Ok(StagedDir {
            target: target.to_path_buf(),
            tmp,
        })
    }

    pub fn path(&self) -> &Path {
        self.tmp.path()
    }

    /// Replaces the target with the staged contents.
    pub fn commit(self) -> Result<PathBuf> {
        if self.target.exists() {
            std::fs::remove_dir_all(&self.target).with_context(|| format!("replacing {}", self.target.display()))?;
        }
        let staged = self.tmp.keep();
        std::fs::rename(&staged, &self.target).with_context(|| format!("moving output to {}", self.target.display()))?;
        Ok(self.target)
    }
}
