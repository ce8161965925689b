//! Synthetic stand-ins for speech, background noise and room responses, used
//! by tests and the quick-start walkthrough when no recorded corpora are at
//! hand.
//!
//! The "speech" is a sequence of voiced syllables: harmonic pulse trains
//! shaped by vowel formants, separated by short pauses. Pitches are
//! half-integer multiples of the codec frame rate and syllables start on
//! frame boundaries, so steady vowels repeat exactly from frame to frame.
//! That keeps the corpus small enough in information content for a desk-scale
//! codec and language model to model it.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::audio::{write_wav, WavEncoding, Waveform, CANONICAL_RATE};
use crate::degrade::{AssetCatalog, AssetKind, AssetRecord};
use crate::error::{Error, Result};
use crate::util::{mix_seed, rng_from_seed};

/// Samples per codec hop; syllables are aligned to this grid.
pub const HOP: usize = 512;

const FORMANTS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
];
const BANDWIDTHS: [f64; 3] = [90.0, 110.0, 170.0];
/// Pitch as a multiple of half the frame rate (44100/1024 Hz).
const PITCH_MULTIPLES: [u32; 3] = [3, 4, 5];
const LEVELS: [f64; 2] = [0.3, 0.6];
const MAX_HARMONIC_HZ: f64 = 9000.0;

fn resonance(f: f64, center: f64, bw: f64) -> f64 {
    let x = (f - center) / (bw / 2.0);
    1.0 / (1.0 + x * x).sqrt()
}

/// One pitch period's worth of harmonic amplitudes for a vowel.
fn harmonic_amplitudes(f0: f64, vowel: usize) -> Vec<f64> {
    let n = (MAX_HARMONIC_HZ / f0) as usize;
    let amps: Vec<f64> = (1..=n)
        .map(|h| {
            let f = h as f64 * f0;
            let env: f64 = FORMANTS[vowel]
                .iter()
                .zip(BANDWIDTHS)
                .map(|(&c, bw)| resonance(f, c, bw))
                .sum();
            env / (1.0 + f / 1500.0)
        })
        .collect();
    let norm = amps.iter().map(|a| a * a).sum::<f64>().sqrt();
    amps.into_iter().map(|a| a / norm).collect()
}

/// Raised-cosine ramp shared by syllable onsets and offsets.
fn ramp(i: usize, len: usize) -> f64 {
    0.5 - 0.5 * (PI * (i as f64 + 0.5) / len as f64).cos()
}

/// A speech-like clip of `n_samples` at 44.1 kHz, fully determined by `seed`.
pub fn speech(seed: u64, n_samples: usize) -> Waveform {
    let mut rng = rng_from_seed(seed);
    let mut out = vec![0.0; n_samples];
    let mut t = rng.gen_range(0..2usize) * HOP;
    while t < n_samples {
        let frames = rng.gen_range(3..=7usize);
        let vowel = rng.gen_range(0..FORMANTS.len());
        let m = PITCH_MULTIPLES[rng.gen_range(0..PITCH_MULTIPLES.len())];
        let level = LEVELS[rng.gen_range(0..LEVELS.len())];
        let f0 = CANONICAL_RATE as f64 / (2 * HOP) as f64 * m as f64;
        let amps = harmonic_amplitudes(f0, vowel);
        let len = (frames * HOP).min(n_samples - t);
        let edge = HOP / 2;
        for i in 0..len {
            let tt = i as f64 / CANONICAL_RATE as f64;
            let env = if i < edge {
                ramp(i, edge)
            } else if i + edge >= frames * HOP {
                ramp(frames * HOP - 1 - i, edge)
            } else {
                1.0
            };
            let s: f64 = amps
                .iter()
                .enumerate()
                .map(|(h, a)| a * (2.0 * PI * (h + 1) as f64 * f0 * tt).sin())
                .sum();
            out[t + i] = level * env * s;
        }
        t += len + rng.gen_range(1..=2usize) * HOP;
    }
    if out.iter().all(|&s| s == 0.0) {
        // Never hand out digital silence as "speech".
        return speech(mix_seed(seed, 1), n_samples);
    }
    let peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.99 {
        out.iter_mut().for_each(|s| *s *= 0.99 / peak);
    }
    Waveform::new(out, CANONICAL_RATE).expect("finite synthetic samples")
}

/// Background noise flavours for the synthetic asset set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseFlavor {
    /// 1/f spectrum.
    Pink,
    /// 1/f² spectrum.
    Brown,
    /// Mains hum with harmonics over a faint hiss.
    Hum,
    /// Band-limited noise gated on and off, crowd-like.
    Babble,
}

impl NoiseFlavor {
    pub const ALL: [NoiseFlavor; 4] = [NoiseFlavor::Pink, NoiseFlavor::Brown, NoiseFlavor::Hum, NoiseFlavor::Babble];

    pub fn name(self) -> &'static str {
        match self {
            NoiseFlavor::Pink => "pink",
            NoiseFlavor::Brown => "brown",
            NoiseFlavor::Hum => "hum",
            NoiseFlavor::Babble => "babble",
        }
    }
}

pub fn noise(flavor: NoiseFlavor, seed: u64, n_samples: usize) -> Waveform {
    let mut rng = rng_from_seed(seed);
    let mut white = || -> f64 { rng.sample(StandardNormal) };
    let fs = CANONICAL_RATE as f64;
    let mut out: Vec<f64> = match flavor {
        NoiseFlavor::Pink => {
            // Paul Kellet's refined pink filter.
            let mut b = [0.0f64; 7];
            (0..n_samples)
                .map(|_| {
                    let w = white();
                    b[0] = 0.99886 * b[0] + w * 0.0555179;
                    b[1] = 0.99332 * b[1] + w * 0.0750759;
                    b[2] = 0.96900 * b[2] + w * 0.1538520;
                    b[3] = 0.86650 * b[3] + w * 0.3104856;
                    b[4] = 0.55000 * b[4] + w * 0.5329522;
                    b[5] = -0.7616 * b[5] - w * 0.0168980;
                    let y = b[..6].iter().sum::<f64>() + b[6] + w * 0.5362;
                    b[6] = w * 0.115926;
                    y
                })
                .collect()
        }
        NoiseFlavor::Brown => {
            let mut y = 0.0;
            (0..n_samples)
                .map(|_| {
                    y = 0.995 * y + 0.1 * white();
                    y
                })
                .collect()
        }
        NoiseFlavor::Hum => {
            let base = if seed % 2 == 0 { 50.0 } else { 60.0 };
            (0..n_samples)
                .map(|i| {
                    let t = i as f64 / fs;
                    let h: f64 = (1..=5).map(|k| (2.0 * PI * base * k as f64 * t).sin() / k as f64).sum();
                    h + 0.05 * white()
                })
                .collect()
        }
        NoiseFlavor::Babble => {
            // Two-pole resonators at random centres, switched by a slow gate.
            let centers = [400.0, 900.0, 1600.0, 2600.0];
            let mut state = [[0.0f64; 2]; 4];
            let gate_len = (0.12 * fs) as usize;
            let mut gate = 1.0;
            (0..n_samples)
                .map(|i| {
                    if i % gate_len == 0 {
                        gate = if white() > -0.5 { 1.0 } else { 0.3 };
                    }
                    let w = white();
                    let mut y = 0.0;
                    for (s, &c) in state.iter_mut().zip(&centers) {
                        let r: f64 = 0.995;
                        let a1 = 2.0 * r * (2.0 * PI * c / fs).cos();
                        let v = w * (1.0 - r) + a1 * s[0] - r * r * s[1];
                        s[1] = s[0];
                        s[0] = v;
                        y += v;
                    }
                    gate * y
                })
                .collect()
        }
    };
    let peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs())).max(1e-12);
    out.iter_mut().for_each(|s| *s *= 0.5 / peak);
    Waveform::new(out, CANONICAL_RATE).expect("finite synthetic noise")
}

/// Exponentially decaying room response with a unit direct path and a
/// handful of early reflections; `rt60_s` sets the decay rate.
pub fn rir(seed: u64, rt60_s: f64) -> Waveform {
    let mut rng = rng_from_seed(seed);
    let fs = CANONICAL_RATE as f64;
    let len = ((rt60_s * fs) as usize).max(64);
    let decay = 6.9 / (rt60_s * fs);
    let mut taps = vec![0.0; len];
    taps[0] = 1.0;
    for _ in 0..6 {
        let at = rng.gen_range((0.002 * fs) as usize..(0.03 * fs) as usize).min(len - 1);
        taps[at] += rng.gen_range(-0.5..0.5) * (-decay * at as f64).exp();
    }
    let onset = (0.005 * fs) as usize;
    for (i, tap) in taps.iter_mut().enumerate().skip(onset) {
        *tap += 0.15 * rng.sample::<f64, _>(StandardNormal) * (-decay * i as f64).exp();
    }
    Waveform::new(taps, CANONICAL_RATE).expect("finite synthetic rir")
}

/// Writes `n_noise` noise clips and `n_rir` room responses as WAV files under
/// `dir` together with a JSON-lines asset manifest `assets.jsonl`. Returns
/// the catalog with paths relative to `dir`.
pub fn write_assets(dir: &Path, n_noise: usize, n_rir: usize, noise_seconds: f64, seed: u64) -> Result<AssetCatalog> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::new();
    for i in 0..n_noise {
        let flavor = NoiseFlavor::ALL[i % NoiseFlavor::ALL.len()];
        let w = noise(flavor, mix_seed(seed, 100 + i as u64), (noise_seconds * CANONICAL_RATE as f64) as usize);
        let name = format!("noise_{i:03}_{}.wav", flavor.name());
        write_wav(&w, dir.join(&name), WavEncoding::Float32)?;
        records.push(AssetRecord {
            path: name,
            kind: AssetKind::Noise,
            duration_s: w.duration_s(),
        });
    }
    for i in 0..n_rir {
        let rt60 = 0.15 + 0.5 * i as f64 / n_rir.max(1) as f64;
        let w = rir(mix_seed(seed, 10_000 + i as u64), rt60);
        let name = format!("rir_{i:03}.wav");
        write_wav(&w, dir.join(&name), WavEncoding::Float32)?;
        records.push(AssetRecord {
            path: name,
            kind: AssetKind::Rir,
            duration_s: w.duration_s(),
        });
    }
    let catalog = AssetCatalog::from_records(records);
    catalog.write_jsonl(dir.join("assets.jsonl"))?;
    Ok(catalog)
}

/// Writes `n` speech-like clips of `seconds` each as `clean_XXXX.wav`.
pub fn write_speech_dir(dir: &Path, n: usize, seconds: f64, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let len = (seconds * CANONICAL_RATE as f64).round() as usize;
    for i in 0..n {
        let w = speech(mix_seed(seed, i as u64), len);
        write_wav(&w, dir.join(format!("clean_{i:04}.wav")), WavEncoding::Float32)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speech_is_deterministic_and_bounded() {
        let a = speech(3, 20_000);
        assert_eq!(a, speech(3, 20_000));
        assert_ne!(a, speech(4, 20_000));
        assert!(a.peak() <= 0.99 + 1e-12);
        assert!(a.power() > 1e-4);
    }

    #[test]
    fn steady_vowel_frames_repeat() {
        // Even pitch multiples repeat every hop, odd ones every two hops.
        let w = speech(11, 44_100);
        let x = w.samples();
        let hits = (2 * HOP..x.len() - 2 * HOP)
            .filter(|&i| x[i] != 0.0 && (x[i] - x[i + 2 * HOP]).abs() < 1e-9)
            .count();
        assert!(hits > 1000, "{hits}");
    }

    #[test]
    fn noises_are_normalized() {
        for f in NoiseFlavor::ALL {
            let w = noise(f, 1, 10_000);
            assert!((w.peak() - 0.5).abs() < 1e-12, "{f:?}");
            assert!(w.power() > 1e-4);
        }
    }

    #[test]
    fn rir_has_direct_path_and_decays() {
        let r = rir(2, 0.3);
        assert_eq!(r.samples()[0], 1.0);
        let n = r.len();
        let head: f64 = r.samples()[1..n / 4].iter().map(|s| s * s).sum();
        let tail: f64 = r.samples()[3 * n / 4..].iter().map(|s| s * s).sum();
        assert!(tail < head * 0.05);
    }

    #[test]
    fn asset_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cat = write_assets(dir.path(), 3, 2, 0.5, 9).unwrap();
        assert_eq!((cat.noise.len(), cat.rir.len()), (3, 2));
        let back = AssetCatalog::read_jsonl(dir.path().join("assets.jsonl")).unwrap();
        assert_eq!(back.noise.len(), 3);
        assert!(crate::degrade::AssetStore::load(&back, dir.path()).is_ok());
    }
}
