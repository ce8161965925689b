use std::f64::consts::PI;

use super::Waveform;
use crate::error::{Error, Result};

const KAISER_BETA: f64 = 8.0;
/// Taps per output sample, measured at the lower of the two rates.
const TAPS_PER_PHASE: usize = 32;
const CUTOFF_FRACTION: f64 = 0.45;
const MAX_TABLE_PHASES: u64 = 4096;

fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= half / k as f64;
        let t2 = term * term;
        sum += t2;
        if t2 < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

struct Kernel {
    /// Lowpass cutoff in cycles per source sample.
    cutoff: f64,
    /// Window half-width in source samples.
    half_width: f64,
    /// Number of source taps read per output sample.
    taps: usize,
    i0_beta: f64,
}

impl Kernel {
    fn new(src: u32, target: u32) -> Self {
        let low = src.min(target) as f64;
        let stretch = (src as f64 / target as f64).max(1.0);
        let half_width = (TAPS_PER_PHASE / 2) as f64 * stretch;
        Kernel {
            cutoff: CUTOFF_FRACTION * low / src as f64,
            half_width,
            taps: 2 * half_width.ceil() as usize,
            i0_beta: bessel_i0(KAISER_BETA),
        }
    }

    fn weight(&self, tau: f64) -> f64 {
        let r = tau / self.half_width;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let arg = 2.0 * self.cutoff * tau;
        let sinc = if arg.abs() < 1e-12 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
        let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / self.i0_beta;
        2.0 * self.cutoff * sinc * window
    }

    /// Unit-DC-gain taps for an output at fractional offset `frac` past a
    /// source sample. Tap `j` multiplies source sample `base + 1 - taps/2 + j`.
    fn phase_taps(&self, frac: f64) -> Vec<f64> {
        let half = (self.taps / 2) as f64;
        let mut taps: Vec<f64> = (0..self.taps)
            .map(|j| self.weight(half - 1.0 - j as f64 + frac))
            .collect();
        let sum: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= sum);
        taps
    }
}

/// Windowed-sinc polyphase resampling between arbitrary integer rates.
/// The anti-aliasing lowpass sits at 0.45 of the lower rate. Resampling to
/// the source rate returns the input unchanged.
pub fn resample(w: &Waveform, target_hz: u32) -> Result<Waveform> {
    if target_hz < 1000 {
        return Err(Error::Config(format!("target rate {target_hz} Hz below 1000 Hz")));
    }
    let src = w.sample_rate_hz();
    if src == target_hz {
        return Ok(w.clone());
    }
    let g = gcd(src as u64, target_hz as u64);
    let up = target_hz as u64 / g;
    let down = src as u64 / g;
    let len = w.len() as u64;
    let out_len = ((len * target_hz as u64 + src as u64 / 2) / src as u64).max(1) as usize;

    let kernel = Kernel::new(src, target_hz);
    let table: Option<Vec<Vec<f64>>> = (up <= MAX_TABLE_PHASES)
        .then(|| (0..up).map(|p| kernel.phase_taps(p as f64 / up as f64)).collect());

    let x = w.samples();
    let half = (kernel.taps / 2) as i64;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        let pos = n * down;
        let base = (pos / up) as i64;
        let phase = pos % up;
        let owned;
        let taps: &[f64] = match &table {
            Some(t) => &t[phase as usize],
            None => {
                owned = kernel.phase_taps(phase as f64 / up as f64);
                &owned
            }
        };
        let first = base + 1 - half;
        let mut acc = 0.0;
        for (j, &t) in taps.iter().enumerate() {
            let i = first + j as i64;
            if i >= 0 && (i as usize) < x.len() {
                acc += t * x[i as usize];
            }
        }
        out.push(acc);
    }
    Waveform::new(out, target_hz)
}
