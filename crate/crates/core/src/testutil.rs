//! Small fixtures shared by unit tests.

use crate::codec::{train_on_waves, Codec, CodecConfig};
use crate::lm::ModelConfig;
use crate::synth;

/// Two 8-entry codebooks over a 64-dim latent; trains in milliseconds.
pub fn tiny_codec() -> Codec {
    let cfg = CodecConfig {
        n_codebooks: 2,
        codebook_size: 8,
        latent_dim: 64,
        ..CodecConfig::desk()
    };
    let waves: Vec<_> = (0..6).map(|i| synth::speech(500 + i, 8192)).collect();
    train_on_waves(&waves, &cfg, 5, 1).unwrap()
}

pub fn tiny_model_cfg(vocab_size: usize, context_len: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        n_kv_heads: 2,
        d_ff: 32,
        context_len,
        ..ModelConfig::desk(vocab_size)
    }
}
