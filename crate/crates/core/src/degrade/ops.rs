use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{AssetStore, DistortionChain, DistortionSpec, DOWNSAMPLE_RATES_HZ};
use crate::audio::{fft_convolve, mean_square, resample, RirKernel, Waveform};
use crate::error::{Error, Result};
use crate::util::{mix_seed, rng_from_seed};

/// Result of mixing noise into a signal at a target SNR.
#[derive(Clone, Debug)]
pub struct NoiseMix {
    /// Mixture after peak normalization.
    pub noisy: Waveform,
    /// Gain applied to the noise segment before mixing.
    pub noise_gain: f64,
    /// Gain applied to the whole mixture by peak normalization (1.0 if none).
    pub peak_gain: f64,
}

impl NoiseMix {
    /// Re-measures the SNR of the mixture against the signal it was built
    /// from, undoing the peak normalization first.
    pub fn measured_snr_db(&self, reference: &Waveform) -> f64 {
        let noise: Vec<f64> = self
            .noisy
            .samples()
            .iter()
            .zip(reference.samples())
            .map(|(y, s)| y / self.peak_gain - s)
            .collect();
        10.0 * (reference.power() / mean_square(&noise)).log10()
    }
}

/// Noise segment of exactly `len` samples: crops longer clips at a seeded
/// offset and loops shorter ones.
fn noise_segment(noise: &[f64], len: usize, seed: u64) -> Vec<f64> {
    if noise.len() >= len {
        let slack = noise.len() - len;
        let start = if slack == 0 {
            0
        } else {
            rng_from_seed(seed).gen_range(0..=slack)
        };
        noise[start..start + len].to_vec()
    } else {
        noise.iter().copied().cycle().take(len).collect()
    }
}

/// `g · noise` with g chosen so that P(reference) / P(g · noise) hits `snr_db`.
fn scale_to_snr(reference_power: f64, noise: &[f64], snr_db: f64) -> Result<(Vec<f64>, f64)> {
    let p_noise = mean_square(noise);
    if p_noise <= 0.0 {
        return Err(Error::DegenerateNoise);
    }
    let g = (reference_power / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok((noise.iter().map(|n| g * n).collect(), g))
}

fn require_power(w: &Waveform) -> Result<f64> {
    let p = w.power();
    if p <= 0.0 {
        return Err(Error::Degenerate("signal has zero power".into()));
    }
    Ok(p)
}

fn mix(clean: &Waveform, components: &[Vec<f64>]) -> Result<(Waveform, f64)> {
    let mut out = clean.samples().to_vec();
    for c in components {
        out.iter_mut().zip(c).for_each(|(o, n)| *o += n);
    }
    let mut w = Waveform::new(out, clean.sample_rate_hz())?;
    let peak_gain = w.peak_normalize();
    Ok((w, peak_gain))
}

/// Adds a recorded noise clip at `snr_db` (full-signal mean-square powers).
pub fn apply_noise(clean: &Waveform, noise: &Waveform, snr_db: f64, seed: u64) -> Result<NoiseMix> {
    let p_clean = require_power(clean)?;
    let seg = noise_segment(noise.samples(), clean.len(), seed);
    let (scaled, noise_gain) = scale_to_snr(p_clean, &seg, snr_db)?;
    let (noisy, peak_gain) = mix(clean, &[scaled])?;
    Ok(NoiseMix {
        noisy,
        noise_gain,
        peak_gain,
    })
}

fn gaussian(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Adds seeded white Gaussian noise at `snr_db`.
pub fn apply_white_noise(clean: &Waveform, snr_db: f64, seed: u64) -> Result<NoiseMix> {
    let p_clean = require_power(clean)?;
    let (scaled, noise_gain) = scale_to_snr(p_clean, &gaussian(clean.len(), seed), snr_db)?;
    let (noisy, peak_gain) = mix(clean, &[scaled])?;
    Ok(NoiseMix {
        noisy,
        noise_gain,
        peak_gain,
    })
}

/// Sample ranges zeroed by packet loss. The signal is tiled left to right
/// into packets whose durations are uniform in `packet_ms_range`; each packet
/// is dropped independently with probability `p_drop`.
pub fn packet_loss_mask(
    len: usize,
    sample_rate_hz: u32,
    packet_ms_range: [f64; 2],
    p_drop: f64,
    seed: u64,
) -> Vec<Range<usize>> {
    let mut rng = rng_from_seed(seed);
    let [lo, hi] = packet_ms_range;
    let mut dropped = Vec::new();
    let mut start = 0;
    while start < len {
        let ms = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let size = ((ms * sample_rate_hz as f64 / 1000.0).round() as usize).max(1);
        let end = (start + size).min(len);
        if rng.gen_bool(p_drop) {
            dropped.push(start..end);
        }
        start = end;
    }
    dropped
}

pub fn apply_packet_loss(w: &Waveform, packet_ms_range: [f64; 2], p_drop: f64, seed: u64) -> Result<Waveform> {
    check_packet_params(packet_ms_range, p_drop)?;
    let mut out = w.samples().to_vec();
    for r in packet_loss_mask(w.len(), w.sample_rate_hz(), packet_ms_range, p_drop, seed) {
        out[r].iter_mut().for_each(|s| *s = 0.0);
    }
    Waveform::new(out, w.sample_rate_hz())
}

fn check_packet_params([lo, hi]: [f64; 2], p_drop: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::InvalidSpec(format!("p_drop {p_drop} is not a probability")));
    }
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::InvalidSpec(format!("bad packet range [{lo}, {hi}] ms")));
    }
    Ok(())
}

/// Round trip through `target_sr` and back, trimmed or padded to the input length.
pub fn apply_downsample(w: &Waveform, target_sr: u32) -> Result<Waveform> {
    if !DOWNSAMPLE_RATES_HZ.contains(&target_sr) {
        return Err(Error::InvalidSpec(format!("downsample rate {target_sr} not allowed")));
    }
    let mut out = resample(&resample(w, target_sr)?, w.sample_rate_hz())?;
    out.fit_to_len(w.len());
    Ok(out)
}

pub fn apply_reverb(w: &Waveform, rir: &Waveform) -> Result<Waveform> {
    let kernel = RirKernel::from_waveform(rir)?;
    let mut out = fft_convolve(w, &kernel)?;
    out.peak_normalize();
    Ok(out)
}

impl DistortionChain {
    /// Structural validity plus parameters that can physically be applied.
    /// Looser than [`DistortionChain::validate`], which also enforces the
    /// sampling table ranges.
    pub fn check_applicable(&self) -> Result<()> {
        if self.specs.is_empty() {
            return Err(Error::InvalidSpec("chain has no distortions".into()));
        }
        if self.specs.windows(2).any(|p| p[0].kind() >= p[1].kind()) {
            return Err(Error::InvalidSpec("chain is not in canonical order".into()));
        }
        for s in &self.specs {
            match s {
                DistortionSpec::PacketLoss {
                    packet_ms_range,
                    p_drop,
                } => check_packet_params(*packet_ms_range, *p_drop)?,
                DistortionSpec::Downsample { .. } => s.validate()?,
                DistortionSpec::Noise { snr_db, .. } | DistortionSpec::WhiteNoise { snr_db } => {
                    if !snr_db.is_finite() {
                        return Err(Error::InvalidSpec("non-finite SNR".into()));
                    }
                }
                DistortionSpec::Reverb { .. } => {}
            }
        }
        Ok(())
    }
}

/// Applies a chain in canonical order and returns the aligned
/// `(noisy, clean)` pair. The target is always the dry clean input.
///
/// Both additive noise kinds are scaled against the power of the
/// (possibly reverberated) speech entering the noise stage, then summed.
pub fn apply_chain(clean: &Waveform, chain: &DistortionChain, assets: &AssetStore) -> Result<(Waveform, Waveform)> {
    chain.check_applicable()?;
    let mut x = clean.clone();
    let mut noise: Vec<Vec<f64>> = Vec::new();
    let flush_noise = |x: &mut Waveform, noise: &mut Vec<Vec<f64>>| -> Result<()> {
        if !noise.is_empty() {
            *x = mix(x, noise)?.0;
            noise.clear();
        }
        Ok(())
    };
    for (i, spec) in chain.specs.iter().enumerate() {
        let seed = mix_seed(chain.seed, i as u64);
        match spec {
            DistortionSpec::Reverb { source_ref } => {
                x = apply_reverb(&x, assets.get(source_ref)?)?;
            }
            DistortionSpec::Noise { snr_db, source_ref } => {
                let seg = noise_segment(assets.get(source_ref)?.samples(), x.len(), seed);
                noise.push(scale_to_snr(require_power(&x)?, &seg, *snr_db)?.0);
            }
            DistortionSpec::WhiteNoise { snr_db } => {
                let seg = gaussian(x.len(), seed);
                noise.push(scale_to_snr(require_power(&x)?, &seg, *snr_db)?.0);
            }
            DistortionSpec::Downsample { target_sr_hz } => {
                flush_noise(&mut x, &mut noise)?;
                x = apply_downsample(&x, *target_sr_hz)?;
            }
            DistortionSpec::PacketLoss {
                packet_ms_range,
                p_drop,
            } => {
                flush_noise(&mut x, &mut noise)?;
                x = apply_packet_loss(&x, *packet_ms_range, *p_drop, seed)?;
            }
        }
    }
    flush_noise(&mut x, &mut noise)?;
    debug_assert_eq!(x.len(), clean.len());
    Ok((x, clean.clone()))
}
