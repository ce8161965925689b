use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{CodecConfig, FrameMatrix};
use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt};
use crate::util::rng_from_seed;

/// Lapped orthogonal analysis/synthesis pair.
///
/// Frames of `2·hop` samples start every `hop` samples on the signal
/// zero-padded to a multiple of `hop` and treated as periodic, so every
/// sample is covered by exactly two sine-windowed frames. Each frame is
/// MDCT-transformed to `hop` coefficients and rotated by a seeded matrix
/// with orthonormal columns down to `latent_dim`. With `latent_dim == hop`
/// the whole map is orthogonal and synthesis inverts analysis exactly.
#[derive(Clone, Debug)]
pub struct Transform {
    hop: usize,
    latent_dim: usize,
    /// `2·hop × latent_dim`: window · MDCT · projection.
    basis: Vec<f64>,
}

/// Columns of a seeded Gaussian matrix orthonormalized by modified Gram-Schmidt.
pub(crate) fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while q.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for u in &q {
                let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, a)| *x -= d * a);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            q.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (j, col) in q.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            out[i * cols + j] = x;
        }
    }
    out
}

impl Transform {
    pub fn new(cfg: &CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hop;
        let n = 2 * h;
        let scale = (2.0 / h as f64).sqrt();
        let mut mdct = vec![0.0; n * h];
        for i in 0..n {
            let w = (PI * (i as f64 + 0.5) / n as f64).sin();
            for k in 0..h {
                let arg = PI / h as f64 * (i as f64 + 0.5 + h as f64 / 2.0) * (k as f64 + 0.5);
                mdct[i * h + k] = scale * w * arg.cos();
            }
        }
        let proj = orthonormal_columns(h, cfg.latent_dim, cfg.projection_seed);
        let mut basis = vec![0.0; n * cfg.latent_dim];
        matmul(&mdct, &proj, &mut basis, n, h, cfg.latent_dim, false);
        Ok(Transform {
            hop: h,
            latent_dim: cfg.latent_dim,
            basis,
        })
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.hop)
    }

    pub fn analyze(&self, w: &Waveform) -> Result<FrameMatrix> {
        let x = w.samples();
        let frame_len = 2 * self.hop;
        if x.len() < frame_len {
            return Err(Error::TooShort {
                len: x.len(),
                frame_len,
            });
        }
        let m = self.n_frames(x.len());
        let period = m * self.hop;
        let mut frames = vec![0.0; m * frame_len];
        for f in 0..m {
            let row = &mut frames[f * frame_len..(f + 1) * frame_len];
            for (i, r) in row.iter_mut().enumerate() {
                let t = (f * self.hop + i) % period;
                *r = if t < x.len() { x[t] } else { 0.0 };
            }
        }
        let mut data = vec![0.0; m * self.latent_dim];
        matmul(&frames, &self.basis, &mut data, m, frame_len, self.latent_dim, false);
        Ok(FrameMatrix::new(data, m, self.latent_dim))
    }

    /// Inverse transform with circular overlap-add; returns `n_frames·hop` samples.
    pub fn synthesize(&self, frames: &FrameMatrix) -> Result<Waveform> {
        if frames.dim() != self.latent_dim {
            return Err(Error::Config(format!(
                "frame dim {} does not match latent dim {}",
                frames.dim(),
                self.latent_dim
            )));
        }
        let m = frames.n_frames();
        if m == 0 {
            return Err(Error::Data("no frames to synthesize".into()));
        }
        let frame_len = 2 * self.hop;
        let mut time = vec![0.0; m * frame_len];
        matmul_nt(frames.data(), &self.basis, &mut time, m, self.latent_dim, frame_len, false);
        let period = m * self.hop;
        let mut out = vec![0.0; period];
        for f in 0..m {
            for i in 0..frame_len {
                out[(f * self.hop + i) % period] += time[f * frame_len + i];
            }
        }
        Waveform::new(out, super::SAMPLE_RATE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(latent: usize) -> CodecConfig {
        CodecConfig {
            frame_len: 64,
            hop: 32,
            latent_dim: latent,
            ..CodecConfig::desk()
        }
    }

    #[test]
    fn projection_columns_are_orthonormal() {
        let q = orthonormal_columns(20, 8, 1);
        for a in 0..8 {
            for b in 0..8 {
                let d: f64 = (0..20).map(|i| q[i * 8 + a] * q[i * 8 + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perfect_reconstruction_small() {
        let t = Transform::new(&small_cfg(32)).unwrap();
        for len in [64usize, 65, 100, 127, 128, 1000] {
            let x: Vec<f64> = (0..len).map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.5).collect();
            let w = Waveform::new(x.clone(), 44100).unwrap();
            let y = t.synthesize(&t.analyze(&w).unwrap()).unwrap();
            assert_eq!(y.len(), len.div_ceil(32) * 32);
            let err = x.iter().zip(y.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "len {len} err {err}");
            assert!(y.samples()[len..].iter().all(|s| s.abs() < 1e-10));
        }
    }

    #[test]
    fn analysis_is_energy_preserving() {
        let t = Transform::new(&small_cfg(32)).unwrap();
        let x: Vec<f64> = (0..320).map(|i| (i as f64 * 0.3).sin()).collect();
        let f = t.analyze(&Waveform::new(x.clone(), 44100).unwrap()).unwrap();
        let e_time: f64 = x.iter().map(|s| s * s).sum();
        let e_coef: f64 = f.data().iter().map(|s| s * s).sum();
        assert!((e_time - e_coef).abs() < 1e-9 * e_time);
    }

    #[test]
    fn too_short() {
        let t = Transform::new(&small_cfg(32)).unwrap();
        let w = Waveform::new(vec![0.1; 63], 44100).unwrap();
        assert!(matches!(t.analyze(&w), Err(Error::TooShort { .. })));
    }

    #[test]
    fn zero_in_zero_out() {
        let t = Transform::new(&small_cfg(16)).unwrap();
        let f = t.analyze(&Waveform::zeros(200, 44100).unwrap()).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn five_seconds_at_hop_512() {
        let t = Transform::new(&CodecConfig::desk()).unwrap();
        assert_eq!(t.n_frames(5 * 44100), 431);
    }
}
