use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, resample, Waveform, CANONICAL_RATE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetKind {
    Noise,
    Rir,
}

/// One line of an asset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssetRecord {
    pub path: String,
    pub kind: AssetKind,
    pub duration_s: f64,
}

/// Noise and RIR inventories, in manifest order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssetCatalog {
    pub noise: Vec<AssetRecord>,
    pub rir: Vec<AssetRecord>,
}

impl AssetCatalog {
    pub fn from_records(records: impl IntoIterator<Item = AssetRecord>) -> Self {
        let mut cat = AssetCatalog::default();
        for r in records {
            match r.kind {
                AssetKind::Noise => cat.noise.push(r),
                AssetKind::Rir => cat.rir.push(r),
            }
        }
        cat
    }

    /// Reads a JSON-lines manifest. Blank lines are skipped.
    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: AssetRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Asset(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            records.push(rec);
        }
        Ok(Self::from_records(records))
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        use std::io::Write;
        let path = path.as_ref();
        crate::util::write_atomic(path, |w| {
            for r in self.noise.iter().chain(&self.rir) {
                serde_json::to_writer(&mut *w, r)?;
                w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
            Ok(())
        })
    }
}

/// Loaded asset audio keyed by the manifest path, resampled to the canonical rate.
#[derive(Clone, Debug, Default)]
pub struct AssetStore {
    audio: BTreeMap<String, Arc<Waveform>>,
}

impl AssetStore {
    /// Loads every asset in the catalog. Relative paths resolve against `base`.
    pub fn load(catalog: &AssetCatalog, base: impl AsRef<Path>) -> Result<Self> {
        let base = base.as_ref();
        let mut audio = BTreeMap::new();
        for rec in catalog.noise.iter().chain(&catalog.rir) {
            let p = PathBuf::from(&rec.path);
            let full = if p.is_absolute() { p } else { base.join(p) };
            let mut w = read_wav(&full)?;
            if w.sample_rate_hz() != CANONICAL_RATE {
                w = resample(&w, CANONICAL_RATE)?;
            }
            audio.insert(rec.path.clone(), Arc::new(w));
        }
        Ok(AssetStore { audio })
    }

    pub fn insert(&mut self, key: impl Into<String>, w: Waveform) {
        self.audio.insert(key.into(), Arc::new(w));
    }

    pub fn get(&self, key: &str) -> Result<&Waveform> {
        self.audio
            .get(key)
            .map(|a| a.as_ref())
            .ok_or_else(|| Error::Asset(format!("asset {key:?} not loaded")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip_and_split() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(
            &p,
            "{\"path\": \"n1.wav\", \"kind\": \"noise\", \"duration_s\": 2.0}\n\n{\"path\": \"r1.wav\", \"kind\": \"rir\", \"duration_s\": 0.3}\n",
        )
        .unwrap();
        let cat = AssetCatalog::read_jsonl(&p).unwrap();
        assert_eq!(cat.noise.len(), 1);
        assert_eq!(cat.rir[0].path, "r1.wav");
        let q = dir.path().join("m2.jsonl");
        cat.write_jsonl(&q).unwrap();
        assert_eq!(AssetCatalog::read_jsonl(&q).unwrap(), cat);
    }

    #[test]
    fn bad_manifest_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "{\"path\": 3}\n").unwrap();
        assert!(matches!(AssetCatalog::read_jsonl(&p), Err(Error::Asset(_))));
    }

    #[test]
    fn missing_asset_lookup() {
        assert!(matches!(AssetStore::default().get("x"), Err(Error::Asset(_))));
    }
}
