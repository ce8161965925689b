//! Signal-level metrics for before/after comparison. These are desk-scale
//! stand-ins and are not comparable with perceptual scores.

mod spectro;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use spectro::{
    colormap, emit_spectrogram_png, frame_starts, hann, log_mel, mel_centers, mel_filterbank, render_rgb,
    spectrogram_png, stft_magnitude, DB_CEIL, DB_FLOOR, MEL_BANDS, MEL_FRAME, MEL_HOP,
};

use crate::audio::{read_wav, resample, Waveform};
use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::trainer::list_wavs;
use crate::util::par_map;

/// Reporting bound for SI-SNR, in dB.
pub const SI_SNR_CAP_DB: f64 = 60.0;
pub const LSD_EPS: f64 = 1e-10;
pub const LSD_FRAME: usize = 1024;
pub const LSD_HOP: usize = 256;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Length(a, b))
    }
}

/// Scale-invariant SNR of `est` against `reference`, clamped to ±60 dB.
pub fn si_snr(est: &[f64], reference: &[f64]) -> Result<f64> {
    same_len(est.len(), reference.len())?;
    let rr: f64 = reference.iter().map(|r| r * r).sum();
    if rr == 0.0 {
        return Err(Error::Degenerate("SI-SNR reference is all zeros".into()));
    }
    let alpha = est.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / rr;
    let (mut target, mut noise) = (0.0, 0.0);
    for (e, r) in est.iter().zip(reference) {
        let t = alpha * r;
        target += t * t;
        noise += (e - t) * (e - t);
    }
    let db = if target == 0.0 {
        f64::NEG_INFINITY
    } else if noise == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (target / noise).log10()
    };
    Ok(db.clamp(-SI_SNR_CAP_DB, SI_SNR_CAP_DB))
}

/// RMS over frames of the RMS over bins of the dB magnitude difference.
pub fn log_spectral_distance(est: &[f64], reference: &[f64], frame_len: usize, hop: usize) -> Result<f64> {
    same_len(est.len(), reference.len())?;
    if frame_len < 2 || hop == 0 {
        return Err(Error::Config("LSD needs frame_len >= 2 and hop >= 1".into()));
    }
    let a = stft_magnitude(est, frame_len, hop);
    let b = stft_magnitude(reference, frame_len, hop);
    let per_frame: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(fa, fb)| {
            let ms = fa
                .iter()
                .zip(fb)
                .map(|(x, y)| {
                    let d = 20.0 * (x + LSD_EPS).log10() - 20.0 * (y + LSD_EPS).log10();
                    d * d
                })
                .sum::<f64>()
                / fa.len() as f64;
            ms.sqrt()
        })
        .collect();
    Ok((per_frame.iter().map(|v| v * v).sum::<f64>() / per_frame.len() as f64).sqrt())
}

/// RMS difference between the two log-mel spectrograms, in dB.
pub fn mel_distance(est: &Waveform, reference: &Waveform) -> Result<f64> {
    same_len(est.len(), reference.len())?;
    let (a, b) = (log_mel(est), log_mel(reference));
    let mut sum = 0.0;
    let mut n = 0usize;
    for (fa, fb) in a.iter().zip(&b) {
        for (x, y) in fa.iter().zip(fb) {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    Ok((sum / n as f64).sqrt())
}

/// Fraction of positions where the two sequences agree.
pub fn token_accuracy(generated: &[u32], reference: &[u32]) -> Result<f64> {
    same_len(generated.len(), reference.len())?;
    if reference.is_empty() {
        return Err(Error::Degenerate("token accuracy of empty sequences".into()));
    }
    let hits = generated.iter().zip(reference).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / reference.len() as f64)
}

/// Metrics for one file, or their mean across files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub si_snr_db: f64,
    pub lsd_db: f64,
    pub mel_distance: f64,
    /// Present only when reference tokens are available (a codec was given).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub token_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileMetrics {
    pub file: String,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub note: String,
    pub files: Vec<FileMetrics>,
    pub aggregate: MetricReport,
}

/// Brings `est` to the reference rate and, when the lengths differ by at
/// most `tolerance` samples, to the reference length.
fn align(est: Waveform, reference: &Waveform, tolerance: usize) -> Result<Waveform> {
    let mut est = if est.sample_rate_hz() == reference.sample_rate_hz() {
        est
    } else {
        resample(&est, reference.sample_rate_hz())?
    };
    if est.len().abs_diff(reference.len()) > tolerance {
        return Err(Error::Length(est.len(), reference.len()));
    }
    est.fit_to_len(reference.len());
    Ok(est)
}

/// Metrics for one estimate/reference pair. Lengths may differ by up to one
/// codec hop (the enhancement duration contract).
pub fn evaluate_pair(est: Waveform, reference: &Waveform, codec: Option<&Codec>) -> Result<MetricReport> {
    let tol = codec.map_or(512, |c| c.config().hop);
    let est = align(est, reference, tol)?;
    let token_accuracy = match codec {
        Some(c) => {
            let (ge, gr) = (c.encode(&est)?, c.encode(reference)?);
            Some(token_accuracy(ge.codes(), gr.codes())?)
        }
        None => None,
    };
    Ok(MetricReport {
        si_snr_db: si_snr(est.samples(), reference.samples())?,
        lsd_db: log_spectral_distance(est.samples(), reference.samples(), LSD_FRAME, LSD_HOP)?,
        mel_distance: mel_distance(&est, reference)?,
        token_accuracy,
    })
}

pub fn aggregate(files: &[FileMetrics]) -> Result<MetricReport> {
    if files.is_empty() {
        return Err(Error::Data("no files to aggregate".into()));
    }
    let n = files.len() as f64;
    let mean = |f: &dyn Fn(&MetricReport) -> f64| files.iter().map(|x| f(&x.metrics)).sum::<f64>() / n;
    let token_accuracy = files
        .iter()
        .map(|x| x.metrics.token_accuracy)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / n);
    Ok(MetricReport {
        si_snr_db: mean(&|m| m.si_snr_db),
        lsd_db: mean(&|m| m.lsd_db),
        mel_distance: mean(&|m| m.mel_distance),
        token_accuracy,
    })
}

/// Evaluates every `*.wav` in `ref_dir` against the same-named file in
/// `est_dir`. Optionally writes `<stem>_ref.png` / `<stem>_est.png`
/// spectrograms into `png_dir`.
pub fn evaluate_dirs(ref_dir: &Path, est_dir: &Path, codec: Option<&Codec>, png_dir: Option<&Path>) -> Result<EvalReport> {
    let refs = list_wavs(ref_dir)?;
    if refs.is_empty() {
        return Err(Error::Data(format!("no .wav files in {}", ref_dir.display())));
    }
    if let Some(d) = png_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let files = par_map(&refs, |rp| -> Result<FileMetrics> {
        let name = rp.file_name().expect("listed file").to_string_lossy().into_owned();
        let ep = est_dir.join(&name);
        if !ep.exists() {
            return Err(Error::Data(format!("no estimate for {name} in {}", est_dir.display())));
        }
        let reference = read_wav(rp)?;
        let est = read_wav(&ep)?;
        if let Some(d) = png_dir {
            let stem = rp.file_stem().expect("listed file").to_string_lossy();
            emit_spectrogram_png(&reference, d.join(format!("{stem}_ref.png")))?;
            emit_spectrogram_png(&est, d.join(format!("{stem}_est.png")))?;
        }
        Ok(FileMetrics {
            file: name,
            metrics: evaluate_pair(est, &reference, codec)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        note: "signal-level desk metrics; not comparable with perceptual or listening-test scores".into(),
        aggregate: aggregate(&files)?,
        files,
    })
}
