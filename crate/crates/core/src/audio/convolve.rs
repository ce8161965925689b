use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};

/// Room impulse response.
#[derive(Clone, Debug, PartialEq)]
pub struct RirKernel {
    taps: Vec<f64>,
    sample_rate_hz: u32,
}

impl RirKernel {
    pub fn new(taps: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if taps.is_empty() || taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidWaveform("RIR must be non-empty and finite".into()));
        }
        if taps.iter().all(|&t| t == 0.0) {
            return Err(Error::InvalidWaveform("RIR has zero energy".into()));
        }
        Ok(RirKernel {
            taps,
            sample_rate_hz,
        })
    }

    pub fn from_waveform(w: &Waveform) -> Result<Self> {
        Self::new(w.samples().to_vec(), w.sample_rate_hz())
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }
}

/// Linear convolution by FFT overlap-add, truncated to the input length so
/// the output stays sample-aligned with the dry signal.
pub fn fft_convolve(w: &Waveform, k: &RirKernel) -> Result<Waveform> {
    if w.sample_rate_hz() != k.sample_rate_hz() {
        return Err(Error::RateMismatch {
            signal: w.sample_rate_hz(),
            kernel: k.sample_rate_hz(),
        });
    }
    let x = w.samples();
    let h = k.taps();
    let out_len = x.len();
    let m = h.len().min(out_len);
    let h = &h[..m];

    let n_fft = (2 * m).next_power_of_two().max(256);
    let block = n_fft - m + 1;
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n_fft);
    let inv = planner.plan_fft_inverse(n_fft);

    let mut kernel_spec: Vec<Complex<f64>> = h
        .iter()
        .map(|&t| Complex::new(t, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n_fft)
        .collect();
    fwd.process(&mut kernel_spec);

    let scale = 1.0 / n_fft as f64;
    let mut out = vec![0.0; out_len];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for start in (0..out_len).step_by(block) {
        let end = (start + block).min(out_len);
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, &s) in buf.iter_mut().zip(&x[start..end]) {
            b.re = s;
        }
        fwd.process(&mut buf);
        for (b, kf) in buf.iter_mut().zip(&kernel_spec) {
            *b *= kf;
        }
        inv.process(&mut buf);
        let span = (end - start + m - 1).min(out_len - start);
        for (o, b) in out[start..start + span].iter_mut().zip(&buf) {
            *o += b.re * scale;
        }
    }
    Waveform::new(out, w.sample_rate_hz())
}

/// Direct O(n·m) convolution truncated to the input length.
pub fn direct_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|n| {
            h.iter()
                .enumerate()
                .take(n + 1)
                .map(|(j, &t)| t * x[n - j])
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::util::rng_from_seed(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    // Oracle kept separate from the public helper.
    fn oracle(x: &[f64], h: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len() + h.len() - 1];
        for (i, &a) in x.iter().enumerate() {
            for (j, &b) in h.iter().enumerate() {
                y[i + j] += a * b;
            }
        }
        y.truncate(x.len());
        y
    }

    #[test]
    fn unit_impulse_is_identity() {
        let w = Waveform::new(random(3000, 1), 44100).unwrap();
        let k = RirKernel::new(vec![1.0], 44100).unwrap();
        let y = fft_convolve(&w, &k).unwrap();
        for (a, b) in y.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn delayed_impulse_shifts() {
        let x = random(2000, 2);
        let w = Waveform::new(x.clone(), 44100).unwrap();
        let mut taps = vec![0.0; 101];
        taps[100] = 1.0;
        let y = fft_convolve(&w, &RirKernel::new(taps, 44100).unwrap()).unwrap();
        assert_eq!(y.len(), 2000);
        for n in 0..2000 {
            let expected = if n < 100 { 0.0 } else { x[n - 100] };
            assert!((y.samples()[n] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_on_fixed_case() {
        let x = random(1000, 5);
        let h = random(64, 6);
        let y = fft_convolve(&Waveform::new(x.clone(), 44100).unwrap(), &RirKernel::new(h.clone(), 44100).unwrap()).unwrap();
        let want = oracle(&x, &h);
        let err = y.samples().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-6, "err {err}");
        assert_eq!(direct_convolve(&x, &h).len(), want.len());
    }

    #[test]
    fn rate_mismatch() {
        let w = Waveform::new(vec![0.0; 10], 44100).unwrap();
        let k = RirKernel::new(vec![1.0], 16000).unwrap();
        assert!(matches!(fft_convolve(&w, &k), Err(Error::RateMismatch { .. })));
    }

    #[test]
    fn zero_energy_kernel_rejected() {
        assert!(RirKernel::new(vec![0.0; 4], 44100).is_err());
        assert!(RirKernel::new(vec![], 44100).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn fft_matches_direct(n in 1usize..4096, m in 1usize..600, seed in any::<u64>()) {
            let x = random(n, seed);
            let mut h = random(m, seed ^ 0xabc);
            h[0] += 2.0;
            let y = fft_convolve(&Waveform::new(x.clone(), 8000).unwrap(), &RirKernel::new(h.clone(), 8000).unwrap()).unwrap();
            let want = oracle(&x, &h);
            for (a, b) in y.samples().iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
