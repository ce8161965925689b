//! Forward pass with activation caching and the matching hand-derived
//! backward pass.

use super::params::{self, Params, ATTN_NORM, FFN_NORM, WK, WO, WQ, WV, W_DOWN, W_GATE, W_UP};
use super::rope::Rope;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::linalg::{gemm, matmul, matmul_nt, matmul_tn, Real, View, ViewMut};

pub(crate) const RMS_EPS: f64 = 1e-5;

/// A causal transformer: weights plus precomputed rotary tables.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: Params<T>,
    pub(crate) rope: Rope<T>,
}

/// Activations of one block, kept for the backward pass.
pub(crate) struct LayerTrace<T> {
    x_in: Vec<T>,
    r1: Vec<T>,
    h1: Vec<T>,
    pub(crate) q: Vec<T>,
    pub(crate) k: Vec<T>,
    pub(crate) v: Vec<T>,
    /// `n_heads × n × n` attention weights; zero above the diagonal.
    pub(crate) probs: Vec<T>,
    ctx: Vec<T>,
    x_mid: Vec<T>,
    r2: Vec<T>,
    h2: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
    act: Vec<T>,
}

pub(crate) struct Trace<T> {
    n: usize,
    pub(crate) layers: Vec<LayerTrace<T>>,
    x_final: Vec<T>,
    rf: Vec<T>,
    hf: Vec<T>,
    pub(crate) logits: Vec<T>,
}

/// `y = x / rms(x) * g` row-wise; returns `y` and the per-row `1/rms`.
pub(crate) fn rms_norm<T: Real>(x: &[T], g: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let n = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut r = vec![T::zero(); n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let ms = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / d as f64;
        let inv = T::from_f64(1.0 / (ms + RMS_EPS).sqrt());
        r[i] = inv;
        for ((o, &v), &gg) in y[i * d..(i + 1) * d].iter_mut().zip(row).zip(g) {
            *o = v * inv * gg;
        }
    }
    (y, r)
}

/// Accumulates `dg` and returns `dx` for [`rms_norm`].
fn rms_norm_backward<T: Real>(x: &[T], r: &[T], g: &[T], dy: &[T], dg: &mut [T], d: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); x.len()];
    for (i, &inv) in r.iter().enumerate() {
        let (xr, dyr) = (&x[i * d..(i + 1) * d], &dy[i * d..(i + 1) * d]);
        let mut dot = 0.0f64;
        for j in 0..d {
            dg[j] += dyr[j] * xr[j] * inv;
            dot += (dyr[j] * g[j] * xr[j]).as_f64();
        }
        let c = T::from_f64(dot * inv.as_f64().powi(3) / d as f64);
        for j in 0..d {
            dx[i * d + j] = inv * g[j] * dyr[j] - xr[j] * c;
        }
    }
    dx
}

pub(crate) fn sigmoid<T: Real>(a: T) -> T {
    T::one() / (T::one() + (-a).exp())
}

/// In-place softmax over `row[..=last]`; entries after `last` are zeroed.
pub(crate) fn causal_softmax<T: Real>(row: &mut [T], last: usize) {
    let m = row[..=last].iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = 0.0f64;
    for v in &mut row[..=last] {
        *v = (*v - m).exp();
        sum += v.as_f64();
    }
    let inv = T::from_f64(1.0 / sum);
    row[..=last].iter_mut().for_each(|v| *v *= inv);
    row[last + 1..].iter_mut().for_each(|v| *v = T::zero());
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig, params: Params<T>) -> Result<Self> {
        cfg.validate()?;
        params.check_shapes(&cfg)?;
        let rope = Rope::new(cfg.head_dim(), cfg.context_len, cfg.rope_theta)?;
        Ok(Model { cfg, params, rope })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = Params::init(&cfg, seed);
        Self::new(cfg, params)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            rope: Rope::new(self.cfg.head_dim(), self.cfg.context_len, self.cfg.rope_theta).expect("validated config"),
        }
    }

    pub(crate) fn p(&self, idx: usize) -> &[T] {
        &self.params.data[idx]
    }

    pub(crate) fn check_input(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.context_len {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                limit: self.cfg.context_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Index {
                index: bad as usize,
                limit: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits for every position, `len × vocab_size` row-major.
    pub fn forward(&self, tokens: &[u32]) -> Result<Vec<T>> {
        Ok(self.trace(tokens)?.logits)
    }

    pub(crate) fn trace(&self, tokens: &[u32]) -> Result<Trace<T>> {
        self.check_input(tokens)?;
        let cfg = &self.cfg;
        let (n, d, f, nh) = (tokens.len(), cfg.d_model, cfg.d_ff, cfg.n_heads);
        let dh = d / nh;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let emb = self.p(params::emb());
        let mut x: Vec<T> = tokens
            .iter()
            .flat_map(|&t| emb[t as usize * d..(t as usize + 1) * d].iter().copied())
            .collect();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let w = |slot| self.p(params::layer(l, slot));
            let (h1, r1) = rms_norm(&x, w(ATTN_NORM), d);
            let mut q = vec![T::zero(); n * d];
            let mut k = vec![T::zero(); n * d];
            let mut v = vec![T::zero(); n * d];
            matmul(&h1, w(WQ), &mut q, n, d, d, false);
            matmul(&h1, w(WK), &mut k, n, d, d, false);
            matmul(&h1, w(WV), &mut v, n, d, d, false);
            for pos in 0..n {
                for h in 0..nh {
                    let at = pos * d + h * dh;
                    self.rope.rotate(&mut q[at..at + dh], pos);
                    self.rope.rotate(&mut k[at..at + dh], pos);
                }
            }
            let mut probs = vec![T::zero(); nh * n * n];
            let mut ctx = vec![T::zero(); n * d];
            for h in 0..nh {
                let p = &mut probs[h * n * n..(h + 1) * n * n];
                gemm(
                    n,
                    dh,
                    n,
                    scale,
                    View::at(&q, h * dh, d, 1),
                    View::at(&k, h * dh, 1, d),
                    T::zero(),
                    ViewMut::rows(p, n),
                );
                for i in 0..n {
                    causal_softmax(&mut p[i * n..(i + 1) * n], i);
                }
                gemm(
                    n,
                    n,
                    dh,
                    T::one(),
                    View::rows(p, n),
                    View::at(&v, h * dh, d, 1),
                    T::zero(),
                    ViewMut::at(&mut ctx, h * dh, d, 1),
                );
            }
            let mut x_mid = x.clone();
            matmul(&ctx, w(WO), &mut x_mid, n, d, d, true);
            let (h2, r2) = rms_norm(&x_mid, w(FFN_NORM), d);
            let mut a = vec![T::zero(); n * f];
            let mut b = vec![T::zero(); n * f];
            matmul(&h2, w(W_GATE), &mut a, n, d, f, false);
            matmul(&h2, w(W_UP), &mut b, n, d, f, false);
            let act: Vec<T> = a.iter().zip(&b).map(|(&a, &b)| a * sigmoid(a) * b).collect();
            let mut x_out = x_mid.clone();
            matmul(&act, w(W_DOWN), &mut x_out, n, f, d, true);
            layers.push(LayerTrace {
                x_in: std::mem::replace(&mut x, x_out),
                r1,
                h1,
                q,
                k,
                v,
                probs,
                ctx,
                x_mid,
                r2,
                h2,
                a,
                b,
                act,
            });
        }
        let (hf, rf) = rms_norm(&x, self.p(params::final_norm(cfg)), d);
        let mut logits = vec![T::zero(); n * cfg.vocab_size];
        matmul(&hf, self.p(params::head(cfg)), &mut logits, n, d, cfg.vocab_size, false);
        Ok(Trace {
            n,
            layers,
            x_final: x,
            rf,
            hf,
            logits,
        })
    }

    /// Masked next-token cross-entropy on one sequence. `mask[t]` selects the
    /// prediction of `tokens[t + 1]` made at position `t`; the last entry
    /// must be false. Gradients of `scale · Σ loss` are accumulated into
    /// `grads`. Returns the summed loss (f64) and the number of targets.
    pub fn accumulate_grad(&self, tokens: &[u32], mask: &[bool], scale: f64, grads: &mut Params<T>) -> Result<(f64, usize)> {
        let (loss, count, dlogits, trace) = self.loss_with_dlogits(tokens, mask, scale)?;
        self.backward(tokens, &trace, &dlogits, grads);
        Ok((loss, count))
    }

    fn loss_with_dlogits(&self, tokens: &[u32], mask: &[bool], scale: f64) -> Result<(f64, usize, Vec<T>, Trace<T>)> {
        if mask.len() != tokens.len() {
            return Err(Error::Length(mask.len(), tokens.len()));
        }
        if mask.last() == Some(&true) {
            return Err(Error::Data("final position has no next-token target".into()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::DegenerateBatch);
        }
        let trace = self.trace(tokens)?;
        let vsz = self.cfg.vocab_size;
        let mut dlogits = vec![T::zero(); trace.logits.len()];
        let mut loss = 0.0;
        let mut count = 0;
        for t in (0..tokens.len()).filter(|&t| mask[t]) {
            let row = &trace.logits[t * vsz..(t + 1) * vsz];
            let target = tokens[t + 1] as usize;
            let (lse, probs) = log_softmax_probs(row);
            loss += lse - row[target].as_f64();
            count += 1;
            let out = &mut dlogits[t * vsz..(t + 1) * vsz];
            for (o, p) in out.iter_mut().zip(&probs) {
                *o = T::from_f64(p * scale);
            }
            out[target] -= T::from_f64(scale);
        }
        Ok((loss, count, dlogits, trace))
    }

    /// Masked loss without gradients.
    pub fn loss(&self, tokens: &[u32], mask: &[bool]) -> Result<(f64, usize)> {
        let (loss, count, _, _) = self.loss_with_dlogits(tokens, mask, 0.0)?;
        Ok((loss, count))
    }

    fn backward(&self, tokens: &[u32], tr: &Trace<T>, dlogits: &[T], g: &mut Params<T>) {
        let cfg = &self.cfg;
        let (n, d, f, nh, vsz) = (tr.n, cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.vocab_size);
        let dh = d / nh;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (hi, fi) = (params::head(cfg), params::final_norm(cfg));

        matmul_tn(&tr.hf, dlogits, &mut g.data[hi], d, n, vsz, true);
        let mut dhf = vec![T::zero(); n * d];
        matmul_nt(dlogits, self.p(hi), &mut dhf, n, vsz, d, false);
        let mut dx = rms_norm_backward(&tr.x_final, &tr.rf, self.p(fi), &dhf, &mut g.data[fi], d);

        for l in (0..cfg.n_layers).rev() {
            let lt = &tr.layers[l];
            let idx = |slot| params::layer(l, slot);
            let w = |slot| self.p(idx(slot));

            // Feed-forward block.
            matmul_tn(&lt.act, &dx, &mut g.data[idx(W_DOWN)], f, n, d, true);
            let mut dact = vec![T::zero(); n * f];
            matmul_nt(&dx, w(W_DOWN), &mut dact, n, d, f, false);
            let mut da = vec![T::zero(); n * f];
            let mut db = vec![T::zero(); n * f];
            for i in 0..n * f {
                let (a, s) = (lt.a[i], sigmoid(lt.a[i]));
                db[i] = dact[i] * a * s;
                da[i] = dact[i] * lt.b[i] * s * (T::one() + a * (T::one() - s));
            }
            matmul_tn(&lt.h2, &da, &mut g.data[idx(W_GATE)], d, n, f, true);
            matmul_tn(&lt.h2, &db, &mut g.data[idx(W_UP)], d, n, f, true);
            let mut dh2 = vec![T::zero(); n * d];
            matmul_nt(&da, w(W_GATE), &mut dh2, n, f, d, false);
            matmul_nt(&db, w(W_UP), &mut dh2, n, f, d, true);
            let dmid = rms_norm_backward(&lt.x_mid, &lt.r2, w(FFN_NORM), &dh2, &mut g.data[idx(FFN_NORM)], d);
            dx.iter_mut().zip(&dmid).for_each(|(a, b)| *a += *b);

            // Attention block.
            matmul_tn(&lt.ctx, &dx, &mut g.data[idx(WO)], d, n, d, true);
            let mut dctx = vec![T::zero(); n * d];
            matmul_nt(&dx, w(WO), &mut dctx, n, d, d, false);
            let mut dq = vec![T::zero(); n * d];
            let mut dk = vec![T::zero(); n * d];
            let mut dv = vec![T::zero(); n * d];
            let mut dp = vec![T::zero(); n * n];
            for h in 0..nh {
                let p = &lt.probs[h * n * n..(h + 1) * n * n];
                // dP = dctx_h · V_hᵀ
                gemm(
                    n,
                    dh,
                    n,
                    T::one(),
                    View::at(&dctx, h * dh, d, 1),
                    View::at(&lt.v, h * dh, 1, d),
                    T::zero(),
                    ViewMut::rows(&mut dp, n),
                );
                // dV_h = Pᵀ · dctx_h
                gemm(
                    n,
                    n,
                    dh,
                    T::one(),
                    View::rows_t(p, n),
                    View::at(&dctx, h * dh, d, 1),
                    T::zero(),
                    ViewMut::at(&mut dv, h * dh, d, 1),
                );
                for i in 0..n {
                    let (pr, dr) = (&p[i * n..=i * n + i], &mut dp[i * n..(i + 1) * n]);
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| (*a * *b).as_f64()).sum();
                    let dot = T::from_f64(dot);
                    for j in 0..=i {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                    dr[i + 1..].iter_mut().for_each(|v| *v = T::zero());
                }
                // dQ_h = dS · K_h · s,  dK_h = dSᵀ · Q_h · s
                gemm(
                    n,
                    n,
                    dh,
                    scale,
                    View::rows(&dp, n),
                    View::at(&lt.k, h * dh, d, 1),
                    T::zero(),
                    ViewMut::at(&mut dq, h * dh, d, 1),
                );
                gemm(
                    n,
                    n,
                    dh,
                    scale,
                    View::rows_t(&dp, n),
                    View::at(&lt.q, h * dh, d, 1),
                    T::zero(),
                    ViewMut::at(&mut dk, h * dh, d, 1),
                );
            }
            for pos in 0..n {
                for h in 0..nh {
                    let at = pos * d + h * dh;
                    self.rope.rotate_inverse(&mut dq[at..at + dh], pos);
                    self.rope.rotate_inverse(&mut dk[at..at + dh], pos);
                }
            }
            matmul_tn(&lt.h1, &dq, &mut g.data[idx(WQ)], d, n, d, true);
            matmul_tn(&lt.h1, &dk, &mut g.data[idx(WK)], d, n, d, true);
            matmul_tn(&lt.h1, &dv, &mut g.data[idx(WV)], d, n, d, true);
            let mut dh1 = vec![T::zero(); n * d];
            matmul_nt(&dq, w(WQ), &mut dh1, n, d, d, false);
            matmul_nt(&dk, w(WK), &mut dh1, n, d, d, true);
            matmul_nt(&dv, w(WV), &mut dh1, n, d, d, true);
            let din = rms_norm_backward(&lt.x_in, &lt.r1, w(ATTN_NORM), &dh1, &mut g.data[idx(ATTN_NORM)], d);
            dx.iter_mut().zip(&din).for_each(|(a, b)| *a += *b);
        }
        let ge = &mut g.data[params::emb()];
        for (i, &t) in tokens.iter().enumerate() {
            let row = &mut ge[t as usize * d..(t as usize + 1) * d];
            row.iter_mut().zip(&dx[i * d..(i + 1) * d]).for_each(|(a, b)| *a += *b);
        }
    }
}

/// Log-sum-exp and softmax of one logit row, in f64.
pub(crate) fn log_softmax_probs<T: Real>(row: &[T]) -> (f64, Vec<f64>) {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (m + s.ln(), e.into_iter().map(|v| v / s).collect())
}
