use serde::{Deserialize, Serialize};

use super::Params;
use crate::linalg::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to every tensor except norm gains.
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 100,
            min_lr_ratio: 0.1,
            clip_norm: 1.0,
        }
    }
}

/// Linear warmup followed by cosine decay to `min_lr_ratio · lr` at
/// `total_steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_ratio: f64,
}

impl LrSchedule {
    pub fn new(cfg: &OptimConfig, total_steps: u64) -> Self {
        LrSchedule {
            peak: cfg.lr,
            warmup_steps: cfg.warmup_steps,
            total_steps,
            min_ratio: cfg.min_lr_ratio,
        }
    }

    /// Learning rate for 0-based `step`.
    pub fn at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.peak * self.min_ratio;
        floor + (self.peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub cfg: OptimConfig,
    pub m: Params<T>,
    pub v: Params<T>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: OptimConfig, params: &Params<T>) -> Self {
        AdamW {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// Clips `grads` to the configured global norm and applies one update
    /// with learning rate `lr`. Returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) -> f64 {
        let norm = grads.norm();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, name) in params.names.iter().enumerate() {
            let decay = if name.ends_with("norm") { 0.0 } else { c.weight_decay };
            let (p, g) = (&mut params.data[i], &grads.data[i]);
            let (m, v) = (&mut self.m.data[i], &mut self.v.data[i]);
            for j in 0..p.len() {
                let gj = g[j].as_f64() * clip;
                let mj = c.beta1 * m[j].as_f64() + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v[j].as_f64() + (1.0 - c.beta2) * gj * gj;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let step = (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                let pj = p[j].as_f64();
                p[j] = T::from_f64(pj - lr * (step + decay * pj));
            }
        }
        norm
    }
}
