//! Token-domain speech enhancement at desk scale.

pub mod audio;
pub mod codec;
pub mod degrade;
pub mod enhance;
pub mod error;
pub mod evalkit;
pub mod linalg;
pub mod lm;
pub mod synth;
#[cfg(test)]
mod testutil;
pub mod tokenizer;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
