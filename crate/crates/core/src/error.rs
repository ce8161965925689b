use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unsupported encoding: {0}")]
    Unsupported(String),
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("sample rate mismatch: signal {signal} Hz, kernel {kernel} Hz")]
    RateMismatch { signal: u32, kernel: u32 },
    #[error("asset error: {0}")]
    Asset(String),
    #[error("noise signal has zero power")]
    DegenerateNoise,
    #[error("invalid distortion spec: {0}")]
    InvalidSpec(String),
    #[error("clip of {len} samples is shorter than one frame ({frame_len})")]
    TooShort { len: usize, frame_len: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("index {index} out of range (limit {limit})")]
    Index { index: usize, limit: usize },
    #[error("token stream corrupted at position {position}: id {id} is not a codebook-{expected} token")]
    StreamCorruption {
        position: usize,
        id: u32,
        expected: usize,
    },
    #[error("sequence of {len} tokens exceeds context limit {limit}")]
    ContextOverflow { len: usize, limit: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("batch has no loss-bearing positions")]
    DegenerateBatch,
    #[error("non-finite values in {0}")]
    Numerics(String),
    #[error("training diverged at step {step}: loss {loss} vs initial {initial}")]
    Divergence { step: u64, loss: f64, initial: f64 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
