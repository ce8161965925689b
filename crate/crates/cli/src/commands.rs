use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use serde_json::json;

use dacse_core::audio::{read_wav, write_wav, WavEncoding, CANONICAL_RATE};
use dacse_core::codec::{train_on_waves, Codec, RvqCodebooks, CODEBOOK_MAGIC};
use dacse_core::degrade::{degrade_dir, read_provenance, AssetCatalog};
use dacse_core::enhance::{EnhanceRequest, Enhancer};
use dacse_core::evalkit::evaluate_dirs;
use dacse_core::lm::{Checkpoint, DecodePolicy, ModelConfig, CHECKPOINT_MAGIC};
use dacse_core::synth;
use dacse_core::tokenizer::{write_dataset, DatasetReader, DATASET_MAGIC};
use dacse_core::trainer::{
    build_datasets, load_clean_set, max_clip_samples, tokenize_pairs, train_stage1, train_stage2, BuildConfig, DatasetCatalog,
    RunOptions, Stage, Telemetry, TrainPlan,
};
use dacse_core::util::write_atomic;

use crate::staging::StagedDir;
use crate::Global;

fn max_samples(g: &Global, max_seconds: f64) -> usize {
    let cfg = BuildConfig {
        max_seconds,
        context_len: g.profile.context_len(),
        ..BuildConfig::default()
    };
    max_clip_samples(&g.profile.codec(), &cfg)
}

/// Assets are resolved relative to the directory holding their manifest.
fn load_assets(manifest: &Path) -> Result<(AssetCatalog, PathBuf)> {
    let catalog = AssetCatalog::read_jsonl(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((catalog, root))
}

fn load_codec(g: &Global, path: &Path) -> Result<Codec> {
    Codec::load(path, &g.profile.codec()).with_context(|| format!("loading codebooks {}", path.display()))
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub clips: usize,
    #[arg(long, default_value_t = 2.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 8)]
    pub noise_assets: usize,
    #[arg(long, default_value_t = 4)]
    pub rirs: usize,
}

pub fn synth(g: &Global, a: SynthArgs) -> Result<()> {
    let staged = StagedDir::new(&a.out)?;
    synth::write_speech_dir(&staged.path().join("clean"), a.clips, a.seconds, g.seed)?;
    synth::write_assets(&staged.path().join("assets"), a.noise_assets, a.rirs, 10.0, g.seed)?;
    let out = staged.commit()?;
    print_json(&json!({
        "clean_dir": out.join("clean"),
        "assets": out.join("assets").join("assets.jsonl"),
        "clips": a.clips,
    }))
}

#[derive(Args, Debug, Serialize)]
pub struct DegradeArgs {
    #[arg(long)]
    pub clean_dir: PathBuf,
    /// JSON-lines asset manifest.
    #[arg(long)]
    pub assets: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    pub max_seconds: f64,
}

pub fn degrade(g: &Global, a: DegradeArgs) -> Result<()> {
    let (catalog, root) = load_assets(&a.assets)?;
    let staged = StagedDir::new(&a.out)?;
    let recs = degrade_dir(&a.clean_dir, &catalog, &root, staged.path(), g.seed, max_samples(g, a.max_seconds))?;
    staged.commit()?;
    print_json(&json!({ "pairs": recs.len(), "manifest": a.out.join(dacse_core::degrade::PROVENANCE_FILE) }))
}

#[derive(Args, Debug, Serialize)]
pub struct CodecTrainArgs {
    #[arg(long)]
    pub clean_dir: PathBuf,
    /// Output codebook file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 5.0)]
    pub max_seconds: f64,
}

pub fn codec_train(g: &Global, a: CodecTrainArgs) -> Result<()> {
    let (clips, dropped) = load_clean_set(&a.clean_dir, max_samples(g, a.max_seconds))?;
    let waves: Vec<_> = clips.into_iter().map(|c| c.wave).collect();
    let codec = train_on_waves(&waves, &g.profile.codec(), a.iters, g.seed)?;
    codec.books().write(&a.out)?;
    let cfg = codec.config();
    print_json(&json!({
        "out": a.out,
        "clips": waves.len(),
        "duplicates_dropped": dropped,
        "n_codebooks": cfg.n_codebooks,
        "codebook_size": cfg.codebook_size,
        "latent_dim": cfg.latent_dim,
    }))
}

#[derive(Args, Debug, Serialize)]
pub struct TokenizeArgs {
    /// Manifest written by `degrade`.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub codec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn tokenize(g: &Global, a: TokenizeArgs) -> Result<()> {
    let codec = load_codec(g, &a.codec)?;
    let records = read_provenance(&a.pairs)?;
    let root = a.pairs.parent().map(Path::to_path_buf).unwrap_or_default();
    let examples = tokenize_pairs(&records, &root, &codec, g.profile.context_len())?;
    write_dataset(&a.out, codec.config(), &examples)?;
    print_json(&json!({ "out": a.out, "records": examples.len() }))
}

#[derive(Args, Debug, Serialize)]
pub struct DatasetBuildArgs {
    #[arg(long)]
    pub clean_dir: PathBuf,
    #[arg(long)]
    pub assets: PathBuf,
    #[arg(long)]
    pub codec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with build settings (max_seconds, heldout_fraction,
    /// stage2_kinds). The seed always comes from `--seed`.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn dataset_build(g: &Global, a: DatasetBuildArgs) -> Result<()> {
    let mut cfg: BuildConfig = match &a.config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => BuildConfig::default(),
    };
    cfg.seed = g.seed;
    cfg.context_len = g.profile.context_len();
    eprintln!("dacse build config: {}", serde_json::to_string(&cfg)?);
    let codec = load_codec(g, &a.codec)?;
    let (catalog, root) = load_assets(&a.assets)?;
    let staged = StagedDir::new(&a.out)?;
    let built = build_datasets(&a.clean_dir, &catalog, &root, &codec, &cfg, staged.path())?;
    staged.commit()?;
    print_json(&json!({
        "out": a.out,
        "clips": built.fingerprints.len(),
        "heldout_clips": built.heldout_fingerprints.len(),
        "duplicates_dropped": built.duplicates_dropped,
        "stage2_tasks": built.stage2.keys().collect::<Vec<_>>(),
    }))
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Directory written by `dataset-build`.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML training plan.
    #[arg(long)]
    pub plan: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Stage-1 checkpoint to fine-tune (Stage-2 plans).
    #[arg(long)]
    pub parent: Option<PathBuf>,
    /// Checkpoint of an interrupted run of the same plan.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// JSON-lines telemetry path (default: `<out>.telemetry.jsonl`).
    #[arg(long)]
    pub telemetry: Option<PathBuf>,
    /// JSON model configuration overriding the profile's.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
}

pub fn train(g: &Global, a: TrainArgs) -> Result<()> {
    let mut plan = TrainPlan::read(&a.plan)?;
    plan.seed = g.seed;
    eprintln!("dacse train plan: {}", serde_json::to_string(&plan)?);
    let catalog = DatasetCatalog::read(&a.data)?;
    let resume = a.resume.as_ref().map(Checkpoint::read).transpose()?;
    let tel_path = a.telemetry.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".telemetry.jsonl");
        p.into()
    });
    let tel = Telemetry::to_file(&tel_path, resume.is_some())?;
    let opts = RunOptions {
        resume,
        checkpoint_path: Some(a.out.clone()),
        ..RunOptions::default()
    };
    let outcome = match plan.stage {
        Stage::Stage1 => {
            if a.parent.is_some() {
                bail!("--parent is only meaningful for stage2 plans");
            }
            let model_cfg: ModelConfig = match &a.model_config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
                None => {
                    let mut m = g.profile.model(catalog.layout().vocab_size());
                    m.context_len = g.profile.context_len();
                    m
                }
            };
            train_stage1(&catalog, &model_cfg, &plan, &opts, tel)?
        }
        Stage::Stage2 => {
            let Some(parent) = &a.parent else { bail!("stage2 plans need --parent <stage1 checkpoint>") };
            train_stage2(&Checkpoint::read(parent)?, &catalog, &plan, &opts, tel)?
        }
    };
    print_json(&json!({
        "out": a.out,
        "telemetry": tel_path,
        "step": outcome.checkpoint.step,
        "initial_heldout": outcome.initial_heldout,
        "final_heldout": outcome.final_heldout,
    }))
}

#[derive(Args, Debug, Serialize)]
pub struct EnhanceArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub codec: PathBuf,
    /// Sampling temperature; greedy decoding when absent.
    #[arg(long)]
    pub temp: Option<f64>,
    /// Restrict sampling to the k most likely admissible tokens.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Chunk length in seconds (rounded down to whole frames).
    #[arg(long)]
    pub chunk_s: Option<f64>,
}

pub fn enhance(g: &Global, a: EnhanceArgs) -> Result<()> {
    let policy = match (a.temp, a.top_k) {
        (None, None) => DecodePolicy::Greedy,
        (t, k) => {
            let temperature = t.unwrap_or(1.0);
            if !(temperature > 0.0) {
                bail!("--temp must be positive");
            }
            DecodePolicy::Sample {
                temperature,
                top_k: k.unwrap_or(0),
                seed: g.seed,
            }
        }
    };
    let enhancer = Enhancer::new(Checkpoint::read(&a.ckpt)?.model()?, load_codec(g, &a.codec)?)?;
    let input = read_wav(&a.input)?;
    let (out, report) = enhancer.enhance(&EnhanceRequest {
        input,
        policy,
        chunk_s: a.chunk_s,
    })?;
    write_wav(&out, &a.out, WavEncoding::Float32)?;
    print_json(&report)
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ref_dir: PathBuf,
    #[arg(long)]
    pub est_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Codebooks for token accuracy (optional).
    #[arg(long)]
    pub codec: Option<PathBuf>,
    /// Directory for reference/estimate spectrogram PNGs.
    #[arg(long)]
    pub png_dir: Option<PathBuf>,
}

pub fn eval(g: &Global, a: EvalArgs) -> Result<()> {
    let codec = a.codec.as_ref().map(|p| load_codec(g, p)).transpose()?;
    let staged = a.png_dir.as_ref().map(|p| StagedDir::new(p)).transpose()?;
    let report = evaluate_dirs(&a.ref_dir, &a.est_dir, codec.as_ref(), staged.as_ref().map(|s| s.path()))?;
    let bytes = serde_json::to_vec_pretty(&report)?;
    write_atomic(&a.out, |w| std::io::Write::write_all(w, &bytes).map_err(|e| dacse_core::Error::io(&a.out, e)))?;
    if let Some(s) = staged {
        s.commit()?;
    }
    print_json(&json!({ "out": a.out, "files": report.files.len(), "aggregate": report.aggregate }))
}

#[derive(Args, Debug, Serialize)]
pub struct InspectArgs {
    pub file: PathBuf,
}

pub fn inspect(_g: &Global, a: InspectArgs) -> Result<()> {
    let mut head = [0u8; 8];
    let n = std::fs::File::open(&a.file)
        .and_then(|mut f| f.read(&mut head))
        .with_context(|| format!("opening {}", a.file.display()))?;
    let head = &head[..n];
    let v = if head.starts_with(CHECKPOINT_MAGIC) {
        let ck = Checkpoint::read(&a.file)?;
        let tensors: Vec<_> = ck
            .params
            .names
            .iter()
            .zip(&ck.params.shapes)
            .map(|(n, s)| json!({ "name": n, "shape": s }))
            .collect();
        json!({
            "kind": "checkpoint",
            "meta": ck.meta,
            "step": ck.step,
            "n_params": ck.params.n_params(),
            "has_optimizer": ck.optimizer.is_some(),
            "sha256": ck.sha256_hex()?,
            "tensors": tensors,
        })
    } else if head.starts_with(DATASET_MAGIC) {
        let reader = DatasetReader::open(&a.file)?;
        let h = *reader.header();
        let mut per_task = std::collections::BTreeMap::<String, usize>::new();
        let mut tokens = 0usize;
        for ex in reader {
            let ex = ex?;
            tokens += ex.ids.len();
            *per_task.entry(ex.task_label.name()).or_default() += 1;
        }
        json!({
            "kind": "dataset",
            "n_codebooks": h.n_codebooks,
            "codebook_size": h.codebook_size,
            "frame_rate_mhz": h.frame_rate_mhz,
            "vocab_size": h.vocab_size,
            "n_records": h.n_records,
            "total_tokens": tokens,
            "records_per_task": per_task,
        })
    } else if head.starts_with(CODEBOOK_MAGIC) {
        let b = RvqCodebooks::read(&a.file)?;
        json!({
            "kind": "codebooks",
            "n_codebooks": b.n_codebooks(),
            "codebook_size": b.codebook_size(),
            "latent_dim": b.dim(),
            "trained_on": dacse_core::util::hex(&b.trained_on),
        })
    } else if head.starts_with(b"RIFF") {
        let w = read_wav(&a.file)?;
        json!({
            "kind": "wav",
            "sample_rate_hz": w.sample_rate_hz(),
            "samples": w.len(),
            "duration_s": w.duration_s(),
            "peak": w.peak(),
            "canonical_rate": w.sample_rate_hz() == CANONICAL_RATE,
        })
    } else {
        bail!("{}: unrecognized file type", a.file.display());
    };
    print_json(&v)
}
