//! Waveform representation and the DSP substrate shared by every stage:
//! WAV I/O, rational resampling and FFT convolution.

mod convolve;
mod resample;
mod wav;

pub use convolve::{direct_convolve, fft_convolve, RirKernel};
pub use resample::resample;
pub use wav::{quantize_pcm16, read_wav, write_wav, WavEncoding};

use crate::error::{Error, Result};

/// Sample rate every pipeline stage works at.
pub const CANONICAL_RATE: u32 = 44_100;

/// Mono sample buffer. Samples are kept in 64-bit precision for DSP and
/// stored as 32-bit in files.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidWaveform("empty sample buffer".into()));
        }
        if sample_rate_hz == 0 {
            return Err(Error::InvalidWaveform("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidWaveform(format!("non-finite sample at {i}")));
        }
        Ok(Waveform {
            samples,
            sample_rate_hz,
        })
    }

    pub fn zeros(len: usize, sample_rate_hz: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate_hz)
    }

    /// Builds a waveform and truncates it to at most `max_seconds`.
    pub fn with_max_duration(samples: Vec<f64>, sample_rate_hz: u32, max_seconds: f64) -> Result<Self> {
        let mut w = Self::new(samples, sample_rate_hz)?;
        w.truncate_seconds(max_seconds);
        Ok(w)
    }

    pub fn truncate_seconds(&mut self, max_seconds: f64) {
        let cap = (max_seconds * self.sample_rate_hz as f64).floor() as usize;
        if cap >= 1 && self.samples.len() > cap {
            self.samples.truncate(cap);
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Mean square over the whole signal.
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    /// Scales the signal down so that its peak is at most 1.0. Returns the
    /// gain applied (1.0 when the signal was already in range).
    pub fn peak_normalize(&mut self) -> f64 {
        let peak = self.peak();
        if peak > 1.0 {
            let g = 1.0 / peak;
            self.samples.iter_mut().for_each(|s| *s *= g);
            // Rounding can leave a sample a hair above 1.
            self.samples.iter_mut().for_each(|s| *s = s.clamp(-1.0, 1.0));
            g
        } else {
            1.0
        }
    }

    /// Pads with zeros or truncates to exactly `len` samples.
    pub fn fit_to_len(&mut self, len: usize) {
        self.samples.resize(len, 0.0);
    }
}

pub(crate) fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|s| s * s).sum::<f64>() / x.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(Waveform::new(vec![], 44100).is_err());
        assert!(Waveform::new(vec![0.0, f64::NAN], 44100).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn duration_cap_truncates() {
        let w = Waveform::with_max_duration(vec![0.1; 44100 * 7], 44100, 5.0).unwrap();
        assert_eq!(w.len(), 44100 * 5);
    }

    #[test]
    fn peak_normalize_only_scales_down() {
        let mut w = Waveform::new(vec![0.5, -0.25], 44100).unwrap();
        assert_eq!(w.peak_normalize(), 1.0);
        assert_eq!(w.samples(), &[0.5, -0.25]);
        let mut w = Waveform::new(vec![2.0, -1.0], 44100).unwrap();
        assert_eq!(w.peak_normalize(), 0.5);
        assert_eq!(w.samples(), &[1.0, -0.5]);
    }
}
