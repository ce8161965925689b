//! Decoder-only transformer over the unified token vocabulary.
//!
//! Pre-norm blocks (RMSNorm, causal multi-head attention with rotary
//! positions, SiLU-gated feed-forward), a final RMSNorm and an untied output
//! head. Forward and backward passes are written out by hand and are generic
//! over `f32` (training) and `f64` (gradient checks).

mod checkpoint;
mod generate;
mod model;
mod optim;
mod params;
mod rope;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use generate::{DecodePolicy, Generation, KvCache, StopReason};
pub use model::Model;
pub use optim::{AdamW, LrSchedule, OptimConfig};
pub use params::{layout as param_layout, Params};
pub use rope::rope_rotate;

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::util::par_map;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub rope_theta: f64,
    pub profile: String,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            n_kv_heads: 4,
            d_ff: 512,
            context_len: 2048,
            rope_theta: 100_000.0,
            profile: "desk".into(),
        }
    }

    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 1536,
            n_layers: 24,
            n_heads: 24,
            n_kv_heads: 24,
            d_ff: 6144,
            context_len: 8192,
            rope_theta: 100_000.0,
            profile: "paper".into(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 || self.context_len == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dimension {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.n_kv_heads != self.n_heads {
            return bad("grouped-query attention is not supported; n_kv_heads must equal n_heads".into());
        }
        if !(self.rope_theta > 1.0) {
            return bad("rope_theta must exceed 1".into());
        }
        Ok(())
    }
}

/// Loss mask for `[bos] noisy [start_clean] clean [eos]`: positions from
/// `start_clean` onwards predict the clean tokens and `eos`.
pub fn clean_target_mask(len: usize, boundary: usize) -> Vec<bool> {
    (0..len).map(|t| t >= boundary && t + 1 < len).collect()
}

/// One sequence of a batch.
#[derive(Clone, Debug)]
pub struct BatchItem<'a> {
    pub tokens: &'a [u32],
    pub mask: Vec<bool>,
    /// Task label used for the loss breakdown.
    pub task: u8,
}

/// Summed loss over a batch and its per-task split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossStats {
    pub loss_sum: f64,
    pub n_targets: usize,
    pub per_task: BTreeMap<u8, (f64, usize)>,
}

impl LossStats {
    pub fn mean(&self) -> f64 {
        self.loss_sum / self.n_targets.max(1) as f64
    }

    pub fn task_mean(&self, task: u8) -> Option<f64> {
        self.per_task.get(&task).map(|(s, n)| s / *n as f64)
    }

    pub fn add(&mut self, task: u8, loss: f64, count: usize) {
        self.loss_sum += loss;
        self.n_targets += count;
        let e = self.per_task.entry(task).or_insert((0.0, 0));
        e.0 += loss;
        e.1 += count;
    }

    pub fn merge(&mut self, other: &LossStats) {
        for (&task, &(s, n)) in &other.per_task {
            self.add(task, s, n);
        }
    }
}

impl<T: Real> Model<T> {
    /// Mean masked cross-entropy over every target in the batch and its
    /// gradient. Examples are processed independently and reduced in batch
    /// order, so the result does not depend on the worker count.
    pub fn batch_gradient(&self, items: &[BatchItem]) -> Result<(LossStats, Params<T>)> {
        let total: usize = items.iter().map(|it| it.mask.iter().filter(|&&m| m).count()).sum();
        if total == 0 {
            return Err(Error::DegenerateBatch);
        }
        let scale = 1.0 / total as f64;
        let parts = par_map(items, |it| -> Result<(f64, usize, Params<T>)> {
            let mut g = self.params.zeros_like();
            if !it.mask.iter().any(|&m| m) {
                return Ok((0.0, 0, g));
            }
            let (l, c) = self.accumulate_grad(it.tokens, &it.mask, scale, &mut g)?;
            Ok((l, c, g))
        });
        let mut stats = LossStats::default();
        let mut grads: Option<Params<T>> = None;
        for (it, part) in items.iter().zip(parts) {
            let (l, c, g) = part?;
            if c > 0 {
                stats.add(it.task, l, c);
            }
            match grads.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grads = Some(g),
            }
        }
        let grads = grads.expect("non-empty batch");
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::Numerics(format!("non-finite gradient in {name}")));
        }
        Ok((stats, grads))
    }

    /// Loss over a set of sequences without gradients.
    pub fn evaluate(&self, items: &[BatchItem]) -> Result<LossStats> {
        let parts = par_map(items, |it| -> Result<(f64, usize)> {
            if !it.mask.iter().any(|&m| m) {
                return Ok((0.0, 0));
            }
            self.loss(it.tokens, &it.mask)
        });
        let mut stats = LossStats::default();
        for (it, part) in items.iter().zip(parts) {
            let (l, c) = part?;
            if c > 0 {
                stats.add(it.task, l, c);
            }
        }
        if stats.n_targets == 0 {
            return Err(Error::DegenerateBatch);
        }
        Ok(stats)
    }
}

#[cfg(test)]
mod tests;
