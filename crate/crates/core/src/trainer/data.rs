//! Turning a directory of clean clips into Stage-1 and Stage-2 token
//! datasets.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, resample, Waveform, CANONICAL_RATE};
use crate::codec::{Codec, CodecConfig};
use crate::degrade::{apply_chain, sample_chain, sample_single, AssetCatalog, AssetStore, DistortionChain, DistortionKind, TaskLabel};
use crate::error::{Error, Result};
use crate::tokenizer::{build_example, read_dataset, write_dataset, TrainingExample, VocabLayout};
use crate::util::{hex, mix_seed, par_map, sha256, write_atomic};

pub const CATALOG_FILE: &str = "catalog.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    /// Clips are cut to this length, and further to what fits the context.
    pub max_seconds: f64,
    pub context_len: usize,
    /// Fraction of clips (by fingerprint) reserved for held-out evaluation.
    pub heldout_fraction: f64,
    /// Distortion kinds that get a Stage-2 dataset.
    pub stage2_kinds: Vec<DistortionKind>,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            max_seconds: 5.0,
            context_len: 2048,
            heldout_fraction: 0.02,
            stage2_kinds: DistortionKind::ALL.to_vec(),
            seed: 0,
        }
    }
}

/// Train and held-out dataset files, relative to the catalog directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPaths {
    pub train: String,
    pub heldout: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetCatalog {
    pub codec: CodecConfig,
    pub stage1: SplitPaths,
    /// Keyed by distortion kind name.
    pub stage2: BTreeMap<String, SplitPaths>,
    /// Hex SHA-256 of every kept clean clip, in dataset order.
    pub fingerprints: Vec<String>,
    pub heldout_fingerprints: Vec<String>,
    pub duplicates_dropped: usize,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetCatalog {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(CATALOG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut cat: DatasetCatalog = serde_json::from_str(&text)?;
        cat.root = dir.to_path_buf();
        Ok(cat)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(CATALOG_FILE);
        let json = serde_json::to_vec_pretty(self)?;
        write_atomic(&path, |w| std::io::Write::write_all(w, &json).map_err(|e| Error::io(&path, e)))
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load(&self, rel: &str) -> Result<Vec<TrainingExample>> {
        Ok(read_dataset(self.path(rel))?.1)
    }

    pub fn layout(&self) -> VocabLayout {
        VocabLayout::for_codec(&self.codec)
    }
}

/// SHA-256 of the PCM16-quantized samples.
pub fn clean_fingerprint(w: &Waveform) -> [u8; 32] {
    let bytes: Vec<u8> = w
        .samples()
        .iter()
        .flat_map(|&s| crate::audio::quantize_pcm16(s).to_le_bytes())
        .collect();
    sha256(&bytes)
}

fn fingerprint_u64(fp: &[u8; 32]) -> u64 {
    u64::from_le_bytes(fp[..8].try_into().expect("8 bytes"))
}

/// Sorted `*.wav` files directly inside `dir`.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    Ok(out)
}

/// Reads, resamples and truncates one clip.
pub fn load_clip(path: &Path, max_samples: usize) -> Result<Waveform> {
    let mut w = read_wav(path)?;
    if w.sample_rate_hz() != CANONICAL_RATE {
        w = resample(&w, CANONICAL_RATE)?;
    }
    if w.len() > max_samples {
        w.fit_to_len(max_samples);
    }
    Ok(w)
}

/// Longest clip (in samples) that both respects `max_seconds` and yields an
/// example that fits `context_len`.
pub fn max_clip_samples(codec: &CodecConfig, cfg: &BuildConfig) -> usize {
    let by_time = (cfg.max_seconds * CANONICAL_RATE as f64).floor() as usize;
    let frames = cfg.context_len.saturating_sub(3) / (2 * codec.n_codebooks);
    by_time.min(frames * codec.hop)
}

/// A clean clip that survived deduplication.
pub struct CleanClip {
    pub wave: Waveform,
    pub fingerprint: [u8; 32],
}

/// Loads every clip, drops content duplicates (first path wins) and returns
/// the survivors with the number dropped.
pub fn load_clean_set(clean_dir: &Path, max_samples: usize) -> Result<(Vec<CleanClip>, usize)> {
    let paths = list_wavs(clean_dir)?;
    if paths.is_empty() {
        return Err(Error::Data(format!("no .wav files in {}", clean_dir.display())));
    }
    let loaded = par_map(&paths, |p| load_clip(p, max_samples));
    let mut seen = BTreeSet::new();
    let mut clips = Vec::new();
    let mut dropped = 0;
    for w in loaded {
        let wave = w?;
        let fingerprint = clean_fingerprint(&wave);
        if seen.insert(fingerprint) {
            clips.push(CleanClip { wave, fingerprint });
        } else {
            dropped += 1;
        }
    }
    Ok((clips, dropped))
}

/// Held-out membership by fingerprint prefix. At least one clip is held out
/// whenever two or more exist, so held-out losses are always defined.
pub fn heldout_mask(fps: &[[u8; 32]], fraction: f64) -> Vec<bool> {
    let threshold = (fraction.clamp(0.0, 1.0) * 65536.0) as u32;
    let mut mask: Vec<bool> = fps
        .iter()
        .map(|fp| (u16::from_be_bytes([fp[0], fp[1]]) as u32) < threshold)
        .collect();
    if fps.len() >= 2 && fraction > 0.0 && !mask.contains(&true) {
        let lowest = (0..fps.len()).min_by_key(|&i| fps[i]).expect("non-empty");
        mask[lowest] = true;
    }
    if mask.iter().all(|&m| m) && fps.len() >= 2 {
        let highest = (0..fps.len()).max_by_key(|&i| fps[i]).expect("non-empty");
        mask[highest] = false;
    }
    mask
}

/// Degrades `clean` with `chain`, tokenizes both sides and builds the example.
pub fn make_example(
    clean: &Waveform,
    chain: &DistortionChain,
    assets: &AssetStore,
    codec: &Codec,
    context_len: usize,
    label: TaskLabel,
) -> Result<TrainingExample> {
    let layout = VocabLayout::for_codec(codec.config());
    let (noisy, clean) = apply_chain(clean, chain, assets)?;
    let ng = codec.encode(&noisy)?;
    let cg = codec.encode(&clean)?;
    build_example(&ng, &cg, &layout, context_len, label, chain.seed)
}

/// Stage-1 chain seed for a clip; depends only on content and run seed.
pub fn clip_seed(seed: u64, fp: &[u8; 32]) -> u64 {
    mix_seed(seed, fingerprint_u64(fp))
}

/// Builds every dataset under `out_dir` and writes `catalog.json`.
pub fn build_datasets(
    clean_dir: &Path,
    assets: &AssetCatalog,
    asset_root: &Path,
    codec: &Codec,
    cfg: &BuildConfig,
    out_dir: &Path,
) -> Result<DatasetCatalog> {
    let ccfg = codec.config();
    let max_samples = max_clip_samples(ccfg, cfg);
    if max_samples < ccfg.frame_len {
        return Err(Error::Config("context too small for a single frame pair".into()));
    }
    let (clips, duplicates_dropped) = load_clean_set(clean_dir, max_samples)?;
    let store = AssetStore::load(assets, asset_root)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let fps: Vec<[u8; 32]> = clips.iter().map(|c| c.fingerprint).collect();
    let held = heldout_mask(&fps, cfg.heldout_fraction);

    let stage1 = par_map(&clips, |c| -> Result<TrainingExample> {
        let chain = sample_chain(clip_seed(cfg.seed, &c.fingerprint), assets)?;
        make_example(&c.wave, &chain, &store, codec, cfg.context_len, chain.label())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let split = |all: Vec<TrainingExample>| -> (Vec<TrainingExample>, Vec<TrainingExample>) {
        let (mut tr, mut ho) = (Vec::new(), Vec::new());
        for (ex, &h) in all.into_iter().zip(&held) {
            if h { ho.push(ex) } else { tr.push(ex) }
        }
        (tr, ho)
    };
    let write_split = |name: &str, all: Vec<TrainingExample>| -> Result<SplitPaths> {
        let (tr, ho) = split(all);
        let paths = SplitPaths {
            train: format!("{name}_train.bin"),
            heldout: format!("{name}_heldout.bin"),
        };
        write_dataset(out_dir.join(&paths.train), ccfg, &tr)?;
        write_dataset(out_dir.join(&paths.heldout), ccfg, &ho)?;
        Ok(paths)
    };
    let stage1_paths = write_split("stage1", stage1)?;

    let mut stage2 = BTreeMap::new();
    for &kind in &cfg.stage2_kinds {
        let exs = par_map(&clips, |c| -> Result<TrainingExample> {
            let seed = mix_seed(clip_seed(cfg.seed, &c.fingerprint), 1000 + kind.bit() as u64);
            let chain = sample_single(kind, seed, assets)?;
            make_example(&c.wave, &chain, &store, codec, cfg.context_len, TaskLabel::single(kind))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        stage2.insert(kind.name().to_string(), write_split(&format!("stage2_{}", kind.name()), exs)?);
    }

    let catalog = DatasetCatalog {
        codec: ccfg.clone(),
        stage1: stage1_paths,
        stage2,
        fingerprints: fps.iter().map(|f| hex(f)).collect(),
        heldout_fingerprints: fps.iter().zip(&held).filter(|(_, &h)| h).map(|(f, _)| hex(f)).collect(),
        duplicates_dropped,
        root: out_dir.to_path_buf(),
    };
    catalog.write(out_dir)?;
    Ok(catalog)
}

/// Tokenizes the pairs listed in a degradation manifest (paths relative to
/// `root`), labelling each example with its chain's distortion set.
pub fn tokenize_pairs(
    records: &[crate::degrade::ProvenanceRecord],
    root: &Path,
    codec: &Codec,
    context_len: usize,
) -> Result<Vec<TrainingExample>> {
    let layout = VocabLayout::for_codec(codec.config());
    par_map(records, |r| -> Result<TrainingExample> {
        let load = |rel: &str| -> Result<Waveform> {
            let w = read_wav(root.join(rel))?;
            if w.sample_rate_hz() == CANONICAL_RATE {
                Ok(w)
            } else {
                resample(&w, CANONICAL_RATE)
            }
        };
        let (noisy, clean) = (load(&r.noisy)?, load(&r.clean)?);
        if noisy.len() != clean.len() {
            return Err(Error::Data(format!("{} and {} differ in length", r.noisy, r.clean)));
        }
        let chain = DistortionChain {
            specs: r.chain.clone(),
            seed: r.seed,
        };
        build_example(&codec.encode(&noisy)?, &codec.encode(&clean)?, &layout, context_len, chain.label(), r.seed)
    })
    .into_iter()
    .collect()
}
