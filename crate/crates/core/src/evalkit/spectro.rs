//! Magnitude STFT, log-mel spectrograms and their PNG rendering.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::util::write_atomic;

pub const MEL_BANDS: usize = 64;
pub const MEL_FRAME: usize = 1024;
pub const MEL_HOP: usize = 256;
/// Displayed dB range of the rendered spectrogram.
pub const DB_FLOOR: f64 = -100.0;
pub const DB_CEIL: f64 = 0.0;
const POWER_EPS: f64 = 1e-10;

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Frame start offsets: every `hop` samples while a full frame fits, and at
/// least one (zero-padded) frame for short signals.
pub fn frame_starts(len: usize, frame_len: usize, hop: usize) -> Vec<usize> {
    if len <= frame_len {
        return vec![0];
    }
    (0..=(len - frame_len) / hop).map(|f| f * hop).collect()
}

/// Hann-windowed magnitude spectra, `frame_len / 2 + 1` bins per frame.
pub fn stft_magnitude(x: &[f64], frame_len: usize, hop: usize) -> Vec<Vec<f64>> {
    let win = hann(frame_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame_len);
    let mut buf = vec![Complex::new(0.0, 0.0); frame_len];
    frame_starts(x.len(), frame_len, hop)
        .into_iter()
        .map(|s| {
            for (i, b) in buf.iter_mut().enumerate() {
                let v = x.get(s + i).copied().unwrap_or(0.0);
                *b = Complex::new(v * win[i], 0.0);
            }
            fft.process(&mut buf);
            buf[..frame_len / 2 + 1].iter().map(|c| c.norm()).collect()
        })
        .collect()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequency of each mel band.
pub fn mel_centers(sample_rate_hz: u32, n_mels: usize) -> Vec<f64> {
    let top = hz_to_mel(sample_rate_hz as f64 / 2.0);
    (1..=n_mels).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect()
}

/// Triangular filters on the mel scale, `n_mels × (frame_len/2 + 1)`.
pub fn mel_filterbank(sample_rate_hz: u32, frame_len: usize, n_mels: usize) -> Vec<Vec<f64>> {
    let top = hz_to_mel(sample_rate_hz as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
    let n_bins = frame_len / 2 + 1;
    let bin_hz = sample_rate_hz as f64 / frame_len as f64;
    (0..n_mels)
        .map(|m| {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|b| {
                    let f = b as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= c {
                        (f - lo) / (c - lo)
                    } else {
                        (hi - f) / (hi - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// Log-mel power in dB, one row of `MEL_BANDS` values per frame. Power is
/// normalized so a full-scale sine peaks near -6 dB.
pub fn log_mel(w: &Waveform) -> Vec<Vec<f64>> {
    let bank = mel_filterbank(w.sample_rate_hz(), MEL_FRAME, MEL_BANDS);
    let norm = hann(MEL_FRAME).iter().sum::<f64>().powi(2);
    stft_magnitude(w.samples(), MEL_FRAME, MEL_HOP)
        .into_iter()
        .map(|mag| {
            bank.iter()
                .map(|filt| {
                    let p: f64 = filt.iter().zip(&mag).map(|(f, m)| f * m * m).sum::<f64>() / norm;
                    10.0 * (p + POWER_EPS).log10()
                })
                .collect()
        })
        .collect()
}

/// Fixed five-stop colormap from black through purple, red and yellow to
/// white; `t` in `[0, 1]`.
pub fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 0.0],
        [80.0, 18.0, 123.0],
        [200.0, 40.0, 60.0],
        [250.0, 190.0, 40.0],
        [255.0, 255.0, 255.0],
    ];
    let x = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (STOPS[i][c] + f * (STOPS[i + 1][c] - STOPS[i][c])).round() as u8;
    }
    out
}

/// RGB pixels for a log-mel matrix: one column per frame, low bands at the
/// bottom. Returns `(width, height, rgb)`.
pub fn render_rgb(mel: &[Vec<f64>]) -> (u32, u32, Vec<u8>) {
    let w = mel.len();
    let h = mel.first().map_or(0, |r| r.len());
    let mut rgb = vec![0u8; w * h * 3];
    for y in 0..h {
        let band = h - 1 - y;
        for (x, frame) in mel.iter().enumerate() {
            let t = (frame[band] - DB_FLOOR) / (DB_CEIL - DB_FLOOR);
            rgb[(y * w + x) * 3..][..3].copy_from_slice(&colormap(t));
        }
    }
    (w as u32, h as u32, rgb)
}

/// PNG bytes of the log-mel spectrogram; deterministic for a given input.
pub fn spectrogram_png(w: &Waveform) -> Result<Vec<u8>> {
    let (width, height, rgb) = render_rgb(&log_mel(w));
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        writer.write_image_data(&rgb).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

pub fn emit_spectrogram_png(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = spectrogram_png(w)?;
    write_atomic(path, |f| std::io::Write::write_all(f, &bytes).map_err(|e| Error::io(path, e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::CANONICAL_RATE;

    fn tone(hz: f64, n: usize) -> Waveform {
        let x = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * hz * i as f64 / CANONICAL_RATE as f64).sin())
            .collect();
        Waveform::new(x, CANONICAL_RATE).unwrap()
    }

    #[test]
    fn tone_lights_one_band() {
        let mel = log_mel(&tone(1000.0, 22_050));
        let centers = mel_centers(CANONICAL_RATE, MEL_BANDS);
        let want = (0..MEL_BANDS)
            .min_by(|&a, &b| (centers[a] - 1000.0).abs().total_cmp(&(centers[b] - 1000.0).abs()))
            .unwrap();
        for frame in &mel {
            let arg = (0..MEL_BANDS).max_by(|&a, &b| frame[a].total_cmp(&frame[b])).unwrap();
            assert!(arg.abs_diff(want) <= 1, "peak band {arg}, expected {want}");
            // Bands far from the tone are far below the peak.
            assert!(frame[want] - frame[(want + 10).min(MEL_BANDS - 1)] > 40.0);
        }
    }

    #[test]
    fn silence_is_uniform_minimum() {
        let (_, _, rgb) = render_rgb(&log_mel(&Waveform::zeros(10_000, CANONICAL_RATE).unwrap()));
        assert!(rgb.iter().all(|&b| b == 0));
    }

    #[test]
    fn png_is_deterministic_and_sized() {
        let w = tone(440.0, 5000);
        let a = spectrogram_png(&w).unwrap();
        assert_eq!(a, spectrogram_png(&w).unwrap());
        let dec = png::Decoder::new(a.as_slice());
        let reader = dec.read_info().unwrap();
        let info = reader.info();
        assert_eq!(info.height as usize, MEL_BANDS);
        assert_eq!(info.width as usize, frame_starts(5000, MEL_FRAME, MEL_HOP).len());
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(-1.0), [0, 0, 0]);
        assert_eq!(colormap(2.0), [255, 255, 255]);
    }
}
