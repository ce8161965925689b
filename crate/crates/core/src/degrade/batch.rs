//! Degrading a whole directory of clean clips into paired WAV files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{apply_chain, sample_chain, AssetCatalog, AssetStore, DistortionSpec};
use crate::audio::{write_wav, WavEncoding};
use crate::error::{Error, Result};
use crate::trainer::{clip_seed, load_clean_set};
use crate::util::{par_map, write_atomic};

pub const PROVENANCE_FILE: &str = "manifest.jsonl";

/// One line of the provenance manifest. Paths are relative to the output
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub clean: String,
    pub noisy: String,
    pub chain: Vec<DistortionSpec>,
    pub seed: u64,
}

/// Reads every clean clip (deduplicated, truncated to `max_samples`),
/// degrades it with a chain seeded from its content and `seed`, and writes
/// `clean/NNNNN.wav`, `noisy/NNNNN.wav` and the manifest under `out_dir`.
pub fn degrade_dir(
    clean_dir: &Path,
    catalog: &AssetCatalog,
    asset_root: &Path,
    out_dir: &Path,
    seed: u64,
    max_samples: usize,
) -> Result<Vec<ProvenanceRecord>> {
    let (clips, _) = load_clean_set(clean_dir, max_samples)?;
    let store = AssetStore::load(catalog, asset_root)?;
    for sub in ["clean", "noisy"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let indexed: Vec<_> = clips.iter().enumerate().collect();
    let records = par_map(&indexed, |(i, clip)| -> Result<ProvenanceRecord> {
        let chain = sample_chain(clip_seed(seed, &clip.fingerprint), catalog)?;
        let (noisy, clean) = apply_chain(&clip.wave, &chain, &store)?;
        let rec = ProvenanceRecord {
            clean: format!("clean/{i:05}.wav"),
            noisy: format!("noisy/{i:05}.wav"),
            chain: chain.specs.clone(),
            seed: chain.seed,
        };
        write_wav(&clean, out_dir.join(&rec.clean), WavEncoding::Float32)?;
        write_wav(&noisy, out_dir.join(&rec.noisy), WavEncoding::Float32)?;
        Ok(rec)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    write_provenance(&out_dir.join(PROVENANCE_FILE), &records)?;
    Ok(records)
}

pub fn write_provenance(path: &Path, records: &[ProvenanceRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_atomic(path, |w| std::io::Write::write_all(w, text.as_bytes()).map_err(|e| Error::io(path, e)))
}

pub fn read_provenance(path: &Path) -> Result<Vec<ProvenanceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::read_wav;

    #[test]
    fn paired_outputs_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let clean = dir.path().join("c");
        crate::synth::write_speech_dir(&clean, 4, 0.2, 1).unwrap();
        let assets = crate::synth::write_assets(&dir.path().join("a"), 2, 1, 1.0, 2).unwrap();
        let out = dir.path().join("o");
        let recs = degrade_dir(&clean, &assets, &dir.path().join("a"), &out, 7, 1 << 20).unwrap();
        assert_eq!(recs.len(), 4);
        assert_eq!(read_provenance(&out.join(PROVENANCE_FILE)).unwrap(), recs);
        for r in &recs {
            assert!(!r.chain.is_empty());
            let (a, b) = (read_wav(out.join(&r.clean)).unwrap(), read_wav(out.join(&r.noisy)).unwrap());
            assert_eq!(a.len(), b.len());
        }
        let out2 = dir.path().join("o2");
        degrade_dir(&clean, &assets, &dir.path().join("a"), &out2, 7, 1 << 20).unwrap();
        for r in &recs {
            assert_eq!(std::fs::read(out.join(&r.noisy)).unwrap(), std::fs::read(out2.join(&r.noisy)).unwrap());
        }
    }
}
