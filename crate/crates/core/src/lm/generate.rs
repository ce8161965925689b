//! Autoregressive decoding with a key/value cache and codebook-position
//! logit masking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{causal_softmax, rms_norm, sigmoid, Model};
use super::params::{self, ATTN_NORM, FFN_NORM, WK, WO, WQ, WV, W_DOWN, W_GATE, W_UP};
use crate::error::{Error, Result};
use crate::linalg::{matmul, Real};
use crate::tokenizer::VocabLayout;
use crate::util::rng_from_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodePolicy {
    Greedy,
    /// Temperature sampling, optionally restricted to the `top_k` most
    /// likely admissible ids (0 = no restriction).
    Sample { temperature: f64, top_k: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    Length,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Generated audio tokens, without `eos`.
    pub tokens: Vec<u32>,
    /// Index in the generated stream where `eos` was emitted.
    pub eos_position: Option<usize>,
    pub stop: StopReason,
}

/// Rotated keys and values of every processed position, per layer.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    len: usize,
}

impl<T> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl<T: Real> Model<T> {
    /// Runs the prompt through the full forward pass, keeping its keys and
    /// values. Returns the cache and the logits of the last position.
    pub fn prefill(&self, tokens: &[u32]) -> Result<(KvCache<T>, Vec<T>)> {
        let tr = self.trace(tokens)?;
        let vsz = self.cfg.vocab_size;
        let last = tr.logits[(tokens.len() - 1) * vsz..].to_vec();
        let (k, v) = tr.layers.into_iter().map(|l| (l.k, l.v)).unzip();
        Ok((KvCache { k, v, len: tokens.len() }, last))
    }

    /// Feeds one token at the next position and returns its logits.
    pub fn step(&self, cache: &mut KvCache<T>, token: u32) -> Result<Vec<T>> {
        let cfg = &self.cfg;
        let pos = cache.len;
        if pos >= cfg.context_len {
            return Err(Error::ContextOverflow {
                len: pos + 1,
                limit: cfg.context_len,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::Index {
                index: token as usize,
                limit: cfg.vocab_size,
            });
        }
        let (d, f, nh) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
        let dh = d / nh;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let emb = self.p(params::emb());
        let mut x = emb[token as usize * d..(token as usize + 1) * d].to_vec();
        let t = pos + 1;
        for l in 0..cfg.n_layers {
            let w = |slot| self.p(params::layer(l, slot));
            let (h1, _) = rms_norm(&x, w(ATTN_NORM), d);
            let mut q = vec![T::zero(); d];
            let mut k = vec![T::zero(); d];
            let mut v = vec![T::zero(); d];
            matmul(&h1, w(WQ), &mut q, 1, d, d, false);
            matmul(&h1, w(WK), &mut k, 1, d, d, false);
            matmul(&h1, w(WV), &mut v, 1, d, d, false);
            for h in 0..nh {
                self.rope.rotate(&mut q[h * dh..(h + 1) * dh], pos);
                self.rope.rotate(&mut k[h * dh..(h + 1) * dh], pos);
            }
            cache.k[l].extend_from_slice(&k);
            cache.v[l].extend_from_slice(&v);
            let (kc, vc) = (&cache.k[l], &cache.v[l]);
            let mut ctx = vec![T::zero(); d];
            let mut scores = vec![T::zero(); t];
            for h in 0..nh {
                let qh = &q[h * dh..(h + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &kc[j * d + h * dh..j * d + (h + 1) * dh];
                    *s = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                causal_softmax(&mut scores, t - 1);
                let out = &mut ctx[h * dh..(h + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    let vh = &vc[j * d + h * dh..j * d + (h + 1) * dh];
                    out.iter_mut().zip(vh).for_each(|(o, &vv)| *o += p * vv);
                }
            }
            matmul(&ctx, w(WO), &mut x, 1, d, d, true);
            let (h2, _) = rms_norm(&x, w(FFN_NORM), d);
            let mut a = vec![T::zero(); f];
            let mut b = vec![T::zero(); f];
            matmul(&h2, w(W_GATE), &mut a, 1, d, f, false);
            matmul(&h2, w(W_UP), &mut b, 1, d, f, false);
            let act: Vec<T> = a.iter().zip(&b).map(|(&a, &b)| a * sigmoid(a) * b).collect();
            matmul(&act, w(W_DOWN), &mut x, 1, f, d, true);
        }
        cache.len = t;
        let (hf, _) = rms_norm(&x, self.p(params::final_norm(cfg)), d);
        let mut logits = vec![T::zero(); cfg.vocab_size];
        matmul(&hf, self.p(params::head(cfg)), &mut logits, 1, d, cfg.vocab_size, false);
        Ok(logits)
    }

    fn check_prompt(&self, prefix: &[u32], layout: &VocabLayout, max_tokens: usize) -> Result<()> {
        if prefix.last() != Some(&layout.start_clean()) {
            return Err(Error::Data("generation prefix must end with start_clean".into()));
        }
        if max_tokens % layout.n_codebooks != 0 {
            return Err(Error::Config(format!(
                "max_tokens {max_tokens} is not a whole number of frames"
            )));
        }
        if layout.vocab_size() != self.cfg.vocab_size {
            return Err(Error::Config(format!(
                "layout vocabulary {} does not match model vocabulary {}",
                layout.vocab_size(),
                self.cfg.vocab_size
            )));
        }
        let need = prefix.len() + max_tokens + 1;
        if need > self.cfg.context_len {
            return Err(Error::ContextOverflow {
                len: need,
                limit: self.cfg.context_len,
            });
        }
        Ok(())
    }

    /// Continues `prefix` (which must end in `start_clean`) with up to
    /// `max_tokens` audio tokens. At clean position `p` only codebook
    /// `p mod L` ids are admissible, plus `eos` on frame boundaries.
    pub fn generate(&self, prefix: &[u32], layout: &VocabLayout, max_tokens: usize, policy: &DecodePolicy) -> Result<Generation> {
        self.check_prompt(prefix, layout, max_tokens)?;
        if max_tokens == 0 {
            return Ok(Generation {
                tokens: Vec::new(),
                eos_position: None,
                stop: StopReason::Length,
            });
        }
        let (mut cache, mut logits) = self.prefill(prefix)?;
        let mut chooser = Chooser::new(policy);
        let mut out = Vec::with_capacity(max_tokens);
        loop {
            let p = out.len();
            let allow_eos = p % layout.n_codebooks == 0;
            let id = chooser.pick(&logits, layout, p, allow_eos);
            if id == layout.eos() {
                return Ok(Generation {
                    tokens: out,
                    eos_position: Some(p),
                    stop: StopReason::Eos,
                });
            }
            out.push(id);
            if out.len() == max_tokens {
                return Ok(Generation {
                    tokens: out,
                    eos_position: None,
                    stop: StopReason::Length,
                });
            }
            logits = self.step(&mut cache, id)?;
        }
    }

    /// Reference decoder that re-runs the full forward pass for every token.
    pub fn generate_uncached(&self, prefix: &[u32], layout: &VocabLayout, max_tokens: usize, policy: &DecodePolicy) -> Result<Generation> {
        self.check_prompt(prefix, layout, max_tokens)?;
        if max_tokens == 0 {
            return Ok(Generation {
                tokens: Vec::new(),
                eos_position: None,
                stop: StopReason::Length,
            });
        }
        let vsz = self.cfg.vocab_size;
        let mut seq = prefix.to_vec();
        let mut chooser = Chooser::new(policy);
        let mut out = Vec::new();
        loop {
            let logits = self.forward(&seq)?;
            let last = &logits[(seq.len() - 1) * vsz..];
            let p = out.len();
            let id = chooser.pick(last, layout, p, p % layout.n_codebooks == 0);
            if id == layout.eos() {
                return Ok(Generation {
                    tokens: out,
                    eos_position: Some(p),
                    stop: StopReason::Eos,
                });
            }
            out.push(id);
            seq.push(id);
            if out.len() == max_tokens {
                return Ok(Generation {
                    tokens: out,
                    eos_position: None,
                    stop: StopReason::Length,
                });
            }
        }
    }
}

struct Chooser {
    policy: DecodePolicy,
    rng: rand_chacha::ChaCha8Rng,
}

impl Chooser {
    fn new(policy: &DecodePolicy) -> Self {
        let seed = match policy {
            DecodePolicy::Sample { seed, .. } => *seed,
            DecodePolicy::Greedy => 0,
        };
        Chooser {
            policy: policy.clone(),
            rng: rng_from_seed(seed),
        }
    }

    fn pick<T: Real>(&mut self, logits: &[T], layout: &VocabLayout, p: usize, allow_eos: bool) -> u32 {
        let mut cands: Vec<(u32, f64)> = layout.book_range(p).map(|id| (id, logits[id as usize].as_f64())).collect();
        if allow_eos {
            cands.push((layout.eos(), logits[layout.eos() as usize].as_f64()));
        }
        match self.policy {
            DecodePolicy::Greedy => {
                cands
                    .iter()
                    .fold((u32::MAX, f64::NEG_INFINITY), |best, &(id, v)| if v > best.1 || best.0 == u32::MAX { (id, v) } else { best })
                    .0
            }
            DecodePolicy::Sample { temperature, top_k, .. } => {
                let temp = temperature.max(1e-6);
                // Stable sort keeps lower ids first among equal logits.
                cands.sort_by(|a, b| b.1.total_cmp(&a.1));
                if top_k > 0 {
                    cands.truncate(top_k);
                }
                let m = cands[0].1;
                let w: Vec<f64> = cands.iter().map(|(_, v)| ((v - m) / temp).exp()).collect();
                let total: f64 = w.iter().sum();
                let mut u = self.rng.gen::<f64>() * total;
                for ((id, _), wi) in cands.iter().zip(&w) {
                    if u < *wi {
                        return *id;
                    }
                    u -= wi;
                }
                cands.last().expect("non-empty candidates").0
            }
        }
    }
}
