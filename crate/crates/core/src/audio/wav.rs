use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};
use crate::util::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(m) => Error::Format(format!("{}: {m}", path.display())),
        hound::Error::Unsupported => Error::Unsupported(format!("{}", path.display())),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads a PCM16 or float32 WAV file. Multi-channel audio is mean-downmixed.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    // The file is open, so short reads past this point mean a damaged file.
    let parse_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Format(format!("{}: {io}", path.display())),
        other => map_hound(path, other),
    };
    let reader = WavReader::new(BufReader::new(file)).map_err(parse_err)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(parse_err)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(parse_err)?,
        (fmt, bits) => {
            return Err(Error::Unsupported(format!(
                "{}: {fmt:?} with {bits} bits per sample",
                path.display()
            )))
        }
    };
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono WAV file. Float32 output is exact for samples representable
/// in 32 bits; PCM16 output rounds to the nearest step and saturates.
pub fn write_wav(w: &Waveform, path: impl AsRef<Path>, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz(),
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    write_atomic(path, |out| {
        let mut writer = WavWriter::new(out, spec).map_err(|e| map_hound(path, e))?;
        for &s in w.samples() {
            match encoding {
                WavEncoding::Pcm16 => writer.write_sample(quantize_pcm16(s)),
                WavEncoding::Float32 => writer.write_sample(s as f32),
            }
            .map_err(|e| map_hound(path, e))?;
        }
        writer.finalize().map_err(|e| map_hound(path, e))
    })
}

pub fn quantize_pcm16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}
