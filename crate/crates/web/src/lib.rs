//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Everything here is a thin wrapper over `dacse-core`; samples cross the
//! boundary as `Float32Array`s at 44.1 kHz.

use wasm_bindgen::prelude::*;

use dacse_core::audio::{Waveform, CANONICAL_RATE};
use dacse_core::codec::{train_on_waves, Codec, CodecConfig};
use dacse_core::degrade::{apply_downsample, apply_noise, apply_packet_loss, apply_reverb, apply_white_noise};
use dacse_core::evalkit::{log_mel, render_rgb, si_snr};
use dacse_core::lm::rope_rotate;
use dacse_core::synth::{self, NoiseFlavor};
use dacse_core::util::mix_seed;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn wave(samples: &[f32]) -> Result<Waveform, JsValue> {
    Waveform::new(samples.iter().map(|&s| s as f64).collect(), CANONICAL_RATE).map_err(js_err)
}

fn to_f32(w: &Waveform) -> Vec<f32> {
    w.samples().iter().map(|&s| s as f32).collect()
}

/// A synthetic speech-like clip.
#[wasm_bindgen]
pub fn speech_clip(seed: u32, seconds: f64) -> Vec<f32> {
    let n = (seconds.clamp(0.05, 10.0) * CANONICAL_RATE as f64) as usize;
    to_f32(&synth::speech(seed as u64, n))
}

/// Applies one distortion. `amount` is the SNR in dB for `white_noise` and
/// `noise`, the target rate in Hz for `downsample`, the drop probability
/// for `packet_loss` and the RT60 in seconds for `reverb`.
#[wasm_bindgen]
pub fn degrade(samples: &[f32], kind: &str, amount: f64, seed: u32) -> Result<Vec<f32>, JsValue> {
    let w = wave(samples)?;
    let out = match kind {
        "white_noise" => apply_white_noise(&w, amount, seed as u64).map_err(js_err)?.noisy,
        "noise" => {
            let babble = synth::noise(NoiseFlavor::Babble, mix_seed(seed as u64, 1), w.len());
            apply_noise(&w, &babble, amount, seed as u64).map_err(js_err)?.noisy
        }
        "downsample" => apply_downsample(&w, amount as u32).map_err(js_err)?,
        "packet_loss" => apply_packet_loss(&w, [50.0, 200.0], amount.clamp(0.0, 1.0), seed as u64).map_err(js_err)?,
        "reverb" => {
            let mut out = apply_reverb(&w, &synth::rir(seed as u64, amount.clamp(0.05, 2.0))).map_err(js_err)?;
            out.fit_to_len(w.len());
            out
        }
        other => return Err(JsValue::from_str(&format!("unknown distortion kind {other:?}"))),
    };
    Ok(to_f32(&out))
}

/// Width in pixels (frames) of the spectrogram of `n_samples` samples.
#[wasm_bindgen]
pub fn spectrogram_width(n_samples: usize) -> usize {
    dacse_core::evalkit::frame_starts(n_samples, dacse_core::evalkit::MEL_FRAME, dacse_core::evalkit::MEL_HOP).len()
}

#[wasm_bindgen]
pub fn spectrogram_height() -> usize {
    dacse_core::evalkit::MEL_BANDS
}

/// Log-mel spectrogram as RGBA pixels, ready for `ImageData`.
#[wasm_bindgen]
pub fn spectrogram_rgba(samples: &[f32]) -> Result<Vec<u8>, JsValue> {
    let (_, _, rgb) = render_rgb(&log_mel(&wave(samples)?));
    Ok(rgb.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect())
}

/// A small residual codec trained in the browser on synthetic speech.
#[wasm_bindgen]
pub struct RvqDemo {
    codec: Codec,
}

#[wasm_bindgen]
impl RvqDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(n_codebooks: usize, codebook_size: usize, seed: u32) -> Result<RvqDemo, JsValue> {
        let cfg = CodecConfig {
            n_codebooks: n_codebooks.clamp(1, 8),
            codebook_size: codebook_size.clamp(2, 256),
            ..CodecConfig::desk()
        };
        let clips: Vec<Waveform> = (0..24).map(|i| synth::speech(mix_seed(seed as u64, i), 22_050)).collect();
        Ok(RvqDemo {
            codec: train_on_waves(&clips, &cfg, 8, seed as u64).map_err(js_err)?,
        })
    }

    pub fn n_codebooks(&self) -> usize {
        self.codec.config().n_codebooks
    }

    /// Decodes `samples` using only the first `stages` codebooks.
    pub fn reconstruct(&self, samples: &[f32], stages: usize) -> Result<Vec<f32>, JsValue> {
        let w = wave(samples)?;
        let grid = self.codec.encode(&w).map_err(js_err)?;
        let mut out = self.codec.decode_stages(&grid, stages.min(self.n_codebooks())).map_err(js_err)?;
        out.fit_to_len(w.len());
        Ok(to_f32(&out))
    }

    /// SI-SNR in dB of the reconstruction after 1..=L stages.
    pub fn stage_si_snr(&self, samples: &[f32]) -> Result<Vec<f64>, JsValue> {
        let w = wave(samples)?;
        (1..=self.n_codebooks())
            .map(|l| {
                let r = self.reconstruct(samples, l)?;
                let r: Vec<f64> = r.iter().map(|&s| s as f64).collect();
                si_snr(&r, w.samples()).map_err(js_err)
            })
            .collect()
    }
}

/// Attention scores `<R(m)q, R(n)k>` for `m = base + offset`, `n = base`,
/// offsets `0..n_offsets`, with seeded random `q`, `k`. Rotary embeddings
/// make the curve independent of `base`.
#[wasm_bindgen]
pub fn rope_scores(dim: usize, theta: f64, base: usize, n_offsets: usize, seed: u32) -> Result<Vec<f64>, JsValue> {
    let dim = dim.max(2) & !1;
    let uniform = |salt: u64| -> Vec<f64> {
        (0..dim as u64)
            .map(|i| {
                let z = mix_seed(mix_seed(seed as u64, salt), i);
                (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect()
    };
    let (q, k) = (uniform(1), uniform(2));
    let kr = rope_rotate(&k, base, theta).map_err(js_err)?;
    (0..n_offsets)
        .map(|o| {
            let qr = rope_rotate(&q, base + o, theta).map_err(js_err)?;
            Ok(qr.iter().zip(&kr).map(|(a, b)| a * b).sum::<f64>() / (dim as f64).sqrt())
        })
        .collect()
}
