use rand::Rng;
use rand_distr::StandardNormal;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::util::rng_from_seed;

/// Per-layer tensor slots, in storage order.
pub(crate) const ATTN_NORM: usize = 0;
pub(crate) const WQ: usize = 1;
pub(crate) const WK: usize = 2;
pub(crate) const WV: usize = 3;
pub(crate) const WO: usize = 4;
pub(crate) const FFN_NORM: usize = 5;
pub(crate) const W_GATE: usize = 6;
pub(crate) const W_UP: usize = 7;
pub(crate) const W_DOWN: usize = 8;
pub(crate) const PER_LAYER: usize = 9;
const LAYER_NAMES: [&str; PER_LAYER] = ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down"];

/// Named dense tensors. Matrices are row-major `in × out` and multiply
/// activations from the right.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub data: Vec<Vec<T>>,
}

pub(crate) fn emb() -> usize {
    0
}

pub(crate) fn layer(l: usize, slot: usize) -> usize {
    1 + l * PER_LAYER + slot
}

pub(crate) fn final_norm(cfg: &ModelConfig) -> usize {
    1 + cfg.n_layers * PER_LAYER
}

pub(crate) fn head(cfg: &ModelConfig) -> usize {
    2 + cfg.n_layers * PER_LAYER
}

/// Names and shapes implied by a config.
pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
    let mut out = vec![("tok_emb".to_string(), vec![v, d])];
    for l in 0..cfg.n_layers {
        let shapes = [vec![d], vec![d, d], vec![d, d], vec![d, d], vec![d, d], vec![d], vec![d, f], vec![d, f], vec![f, d]];
        for (name, shape) in LAYER_NAMES.iter().zip(shapes) {
            out.push((format!("layers.{l}.{name}"), shape));
        }
    }
    out.push(("final_norm".into(), vec![d]));
    out.push(("head".into(), vec![d, v]));
    out
}

impl<T: Real> Params<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (names, shapes): (Vec<_>, Vec<_>) = layout(cfg).into_iter().unzip();
        let data = shapes.iter().map(|s: &Vec<usize>| vec![T::zero(); s.iter().product()]).collect();
        Params { names, shapes, data }
    }

    /// Normal(0, 0.02) weights, residual output projections shrunk by
    /// `1/√(2·n_layers)`, unit norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = rng_from_seed(seed);
        let resid = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        for (name, t) in p.names.iter().zip(p.data.iter_mut()) {
            let is_norm = name.ends_with("norm");
            let std = if name.ends_with(".wo") || name.ends_with(".w_down") {
                0.02 * resid
            } else {
                0.02
            };
            for x in t.iter_mut() {
                *x = if is_norm {
                    T::one()
                } else {
                    T::from_f64(std * rng.sample::<f64, _>(StandardNormal))
                };
            }
        }
        p
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            data: self.data.iter().map(|t| t.iter().map(|x| U::from_f64(x.as_f64())).collect()).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            data: self.data.iter().map(|t| vec![T::zero(); t.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().flatten().for_each(|x| *x *= s);
    }

    /// Global L2 norm, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.data.iter().flatten().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.names
            .iter()
            .zip(&self.data)
            .find(|(_, t)| t.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n.as_str())
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let want = layout(cfg);
        if want.len() != self.names.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", want.len(), self.names.len())));
        }
        for ((name, shape), (n, s)) in want.iter().zip(self.names.iter().zip(&self.shapes)) {
            if name != n || shape != s {
                return Err(Error::Format(format!("tensor {n} {s:?} does not match {name} {shape:?}")));
            }
        }
        for (n, (s, t)) in self.names.iter().zip(self.shapes.iter().zip(&self.data)) {
            if s.iter().product::<usize>() != t.len() {
                return Err(Error::Format(format!("tensor {n} has wrong element count")));
            }
        }
        Ok(())
    }
}
