mod commands;
mod staging;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dacse_core::codec::CodecConfig;
use dacse_core::lm::ModelConfig;

/// Tool version plus the version of every file format it reads and writes.
pub const LONG_VERSION: &str = "0.1.0\nformats: codebook RVQ1 v1, dataset DSE1 v1, checkpoint DSE1CKPT v1, wav pcm16/float32";

#[derive(Parser, Debug)]
#[command(name = "dacse", version, long_version = LONG_VERSION, about = "Token-domain speech enhancement pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct Global {
    /// Root seed; every random choice in the run derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Hyperparameter profile.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
    /// Worker threads (0 = one per core). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn codec(self) -> CodecConfig {
        match self {
            Profile::Desk => CodecConfig::desk(),
            Profile::Paper => CodecConfig::paper(),
        }
    }

    pub fn model(self, vocab_size: usize) -> ModelConfig {
        match self {
            Profile::Desk => ModelConfig::desk(vocab_size),
            Profile::Paper => ModelConfig::paper(vocab_size),
        }
    }

    pub fn context_len(self) -> usize {
        self.model(1).context_len
    }
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
enum Command {
    /// Write a synthetic speech-like corpus plus noise and room-response assets.
    Synth(commands::SynthArgs),
    /// Degrade a directory of clean clips into noisy/clean pairs.
    Degrade(commands::DegradeArgs),
    /// Fit residual codebooks on a directory of clean clips.
    CodecTrain(commands::CodecTrainArgs),
    /// Tokenize the pairs of a degradation manifest into a dataset file.
    Tokenize(commands::TokenizeArgs),
    /// Build Stage-1 and per-task Stage-2 token datasets.
    DatasetBuild(commands::DatasetBuildArgs),
    /// Run Stage-1 or Stage-2 training from a plan file.
    Train(commands::TrainArgs),
    /// Enhance one WAV file.
    Enhance(commands::EnhanceArgs),
    /// Compare estimates against references.
    Eval(commands::EvalArgs),
    /// Print the header of a dataset, checkpoint, codebook or WAV file.
    Inspect(commands::InspectArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let resolved = serde_json::json!({ "global": &cli.global, "args": &cli.command });
    eprintln!("dacse config: {resolved}");
    let g = cli.global.clone();
    let result = dacse_core::util::with_jobs(g.jobs, move || match cli.command {
        Command::Synth(a) => commands::synth(&g, a),
        Command::Degrade(a) => commands::degrade(&g, a),
        Command::CodecTrain(a) => commands::codec_train(&g, a),
        Command::Tokenize(a) => commands::tokenize(&g, a),
        Command::DatasetBuild(a) => commands::dataset_build(&g, a),
        Command::Train(a) => commands::train(&g, a),
        Command::Enhance(a) => commands::enhance(&g, a),
        Command::Eval(a) => commands::eval(&g, a),
        Command::Inspect(a) => commands::inspect(&g, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn long_version_names_current_formats() {
        assert!(LONG_VERSION.starts_with(env!("CARGO_PKG_VERSION")));
        let books = std::str::from_utf8(dacse_core::codec::CODEBOOK_MAGIC).unwrap();
        assert!(LONG_VERSION.contains(&format!("{books} v{}", dacse_core::codec::CODEBOOK_VERSION)));
        let ds = std::str::from_utf8(dacse_core::tokenizer::DATASET_MAGIC).unwrap();
        assert!(LONG_VERSION.contains(&format!("dataset {ds} v{}", dacse_core::tokenizer::DATASET_VERSION)));
        let ck = std::str::from_utf8(dacse_core::lm::CHECKPOINT_MAGIC).unwrap();
        assert!(LONG_VERSION.contains(&format!("{ck} v{}", dacse_core::lm::CHECKPOINT_VERSION)));
    }

    #[test]
    fn paper_profile_matches_reference_sizes() {
        assert_eq!(Profile::Paper.context_len(), 8192);
        assert_eq!(Profile::Desk.context_len(), 2048);
        assert_eq!(Profile::Paper.codec().n_codebooks, 9);
    }
}
