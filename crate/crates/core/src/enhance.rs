//! Inference: waveform in, noisy tokens, generated clean tokens, waveform out.

use serde::{Deserialize, Serialize};

use crate::audio::{resample, Waveform, CANONICAL_RATE};
use crate::codec::{Codec, TokenGrid};
use crate::error::{Error, Result};
use crate::lm::{DecodePolicy, Model, StopReason};
use crate::tokenizer::{flatten, unflatten, VocabLayout};
use crate::util::mix_seed;

#[derive(Clone, Debug)]
pub struct EnhanceRequest {
    pub input: Waveform,
    pub policy: DecodePolicy,
    /// Segment length in seconds, rounded down to whole frames. When absent
    /// the input is split into the longest chunks the context allows.
    pub chunk_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkReport {
    pub start_frame: usize,
    pub n_frames: usize,
    /// Audio tokens produced by the model (excluding `eos`).
    pub generated_tokens: usize,
    pub eos_position: Option<usize>,
    pub stop: StopReason,
    /// Trailing frames filled with the zero code after an early `eos`.
    pub filled_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub input_samples: usize,
    pub output_samples: usize,
    pub sample_rate_hz: u32,
    pub n_frames: usize,
    pub frames_per_chunk: usize,
    pub total_tokens: usize,
    pub early_stop: bool,
    pub policy: DecodePolicy,
    pub chunks: Vec<ChunkReport>,
}

/// A loaded model and codec pair.
pub struct Enhancer {
    model: Model<f32>,
    codec: Codec,
    layout: VocabLayout,
}

impl Enhancer {
    pub fn new(model: Model<f32>, codec: Codec) -> Result<Self> {
        let layout = VocabLayout::for_codec(codec.config());
        if model.cfg.vocab_size != layout.vocab_size() {
            return Err(Error::Config(format!(
                "checkpoint vocabulary {} does not match codec vocabulary {}",
                model.cfg.vocab_size,
                layout.vocab_size()
            )));
        }
        Ok(Enhancer { model, codec, layout })
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn layout(&self) -> &VocabLayout {
        &self.layout
    }

    /// Longest chunk, in frames, whose full example fits the context.
    pub fn max_chunk_frames(&self) -> usize {
        self.model.cfg.context_len.saturating_sub(3) / (2 * self.layout.n_codebooks)
    }

    fn chunk_frames(&self, chunk_s: Option<f64>) -> Result<usize> {
        let max = self.max_chunk_frames();
        if max == 0 {
            return Err(Error::Config("context too small for a single frame".into()));
        }
        let Some(s) = chunk_s else { return Ok(max) };
        if !(s > 0.0) {
            return Err(Error::Config(format!("chunk length must be positive, got {s}")));
        }
        let hop = self.codec.config().hop;
        let frames = ((s * CANONICAL_RATE as f64) as usize / hop).max(1);
        if frames > max {
            return Err(Error::Config(format!(
                "chunk of {frames} frames needs {} tokens; context holds {}",
                self.layout.example_len(frames),
                self.model.cfg.context_len
            )));
        }
        Ok(frames)
    }

    /// Generates the clean grid for one noisy grid that fits the context.
    pub fn enhance_grid(&self, noisy: &TokenGrid, policy: &DecodePolicy) -> Result<(TokenGrid, ChunkReport)> {
        let l = self.layout.n_codebooks;
        let n = noisy.n_frames();
        let mut prefix = Vec::with_capacity(n * l + 2);
        prefix.push(self.layout.bos());
        prefix.extend(flatten(noisy, &self.layout)?);
        prefix.push(self.layout.start_clean());
        let gen = self.model.generate(&prefix, &self.layout, n * l, policy)?;
        let mut ids = gen.tokens.clone();
        let filled = n - ids.len() / l;
        for i in ids.len()..n * l {
            ids.push(self.layout.token(i % l, 0));
        }
        let grid = unflatten(&ids, &self.layout)?;
        Ok((
            grid,
            ChunkReport {
                start_frame: 0,
                n_frames: n,
                generated_tokens: gen.tokens.len(),
                eos_position: gen.eos_position,
                stop: gen.stop,
                filled_frames: filled,
            },
        ))
    }

    /// Enhances a waveform chunk by chunk and splices the results.
    pub fn enhance(&self, req: &EnhanceRequest) -> Result<(Waveform, GenerationReport)> {
        let (input, per_chunk, parts) = self.run(req)?;
        let mut out = Vec::with_capacity(input.len());
        let mut chunks = Vec::with_capacity(parts.len());
        for (grid, rep, len) in parts {
            let mut wave = self.codec.decode(&grid)?;
            wave.fit_to_len(len);
            out.extend_from_slice(wave.samples());
            chunks.push(rep);
        }
        let output = Waveform::new(out, CANONICAL_RATE)?;
        let report = GenerationReport {
            input_samples: input.len(),
            output_samples: output.len(),
            sample_rate_hz: CANONICAL_RATE,
            n_frames: chunks.iter().map(|c| c.n_frames).sum(),
            frames_per_chunk: per_chunk,
            total_tokens: chunks.iter().map(|c| c.generated_tokens).sum(),
            early_stop: chunks.iter().any(|c| c.stop == StopReason::Eos && c.filled_frames > 0),
            policy: req.policy.clone(),
            chunks,
        };
        Ok((output, report))
    }

    /// Generated clean grids, one per chunk.
    pub fn enhance_tokens(&self, req: &EnhanceRequest) -> Result<Vec<TokenGrid>> {
        Ok(self.run(req)?.2.into_iter().map(|(g, _, _)| g).collect())
    }

    /// Splits the input into frame-aligned chunks and generates each one.
    /// Pieces shorter than one analysis frame are zero-padded; the returned
    /// length is the unpadded sample count.
    #[allow(clippy::type_complexity)]
    fn run(&self, req: &EnhanceRequest) -> Result<(Waveform, usize, Vec<(TokenGrid, ChunkReport, usize)>)> {
        let input = if req.input.sample_rate_hz() == CANONICAL_RATE {
            req.input.clone()
        } else {
            resample(&req.input, CANONICAL_RATE)?
        };
        if input.is_empty() {
            return Err(Error::InvalidWaveform("cannot enhance an empty waveform".into()));
        }
        let cfg = self.codec.config();
        let per_chunk = self.chunk_frames(req.chunk_s)?;
        let mut parts = Vec::new();
        let mut frame = 0;
        for (i, piece) in input.samples().chunks(per_chunk * cfg.hop).enumerate() {
            let mut samples = piece.to_vec();
            if samples.len() < cfg.frame_len {
                samples.resize(cfg.frame_len, 0.0);
            }
            let noisy = self.codec.encode(&Waveform::new(samples, CANONICAL_RATE)?)?;
            if noisy.n_frames() > per_chunk {
                return Err(Error::Config(format!(
                    "a {}-sample chunk needs {} frames; context allows {per_chunk}",
                    piece.len(),
                    noisy.n_frames()
                )));
            }
            let policy = match &req.policy {
                DecodePolicy::Sample { temperature, top_k, seed } => DecodePolicy::Sample {
                    temperature: *temperature,
                    top_k: *top_k,
                    seed: mix_seed(*seed, i as u64),
                },
                p => p.clone(),
            };
            let (grid, mut rep) = self.enhance_grid(&noisy, &policy)?;
            rep.start_frame = frame;
            frame += rep.n_frames;
            parts.push((grid, rep, piece.len()));
        }
        Ok((input, per_chunk, parts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use crate::testutil::{tiny_codec, tiny_model_cfg};
    use crate::tokenizer::validate_stream;

    fn enhancer(context: usize, seed: u64) -> Enhancer {
        let codec = tiny_codec();
        let v = VocabLayout::for_codec(codec.config()).vocab_size();
        Enhancer::new(Model::init(tiny_model_cfg(v, context), seed).unwrap(), codec).unwrap()
    }

    fn request(input: Waveform, chunk_s: Option<f64>) -> EnhanceRequest {
        EnhanceRequest {
            input,
            policy: DecodePolicy::Greedy,
            chunk_s,
        }
    }

    #[test]
    fn silence_keeps_duration() {
        let e = enhancer(128, 1);
        for len in [100, 1024, 5000, 44_100] {
            let (out, rep) = e.enhance(&request(Waveform::zeros(len, CANONICAL_RATE).unwrap(), None)).unwrap();
            assert_eq!(out.len(), len);
            assert_eq!(rep.output_samples, len);
            assert!(out.samples().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn chunks_are_frame_aligned_and_valid() {
        let e = enhancer(128, 2);
        let w = synth::speech(3, 30_000);
        let (_, rep) = e.enhance(&request(w.clone(), None)).unwrap();
        let per = e.max_chunk_frames();
        assert_eq!(rep.frames_per_chunk, per);
        for (i, c) in rep.chunks.iter().enumerate() {
            assert_eq!(c.start_frame, i * per);
        }
        for g in e.enhance_tokens(&request(w, None)).unwrap() {
            validate_stream(&flatten(&g, e.layout()).unwrap(), e.layout()).unwrap();
        }
    }

    #[test]
    fn greedy_is_deterministic_and_sampling_is_seeded() {
        let e = enhancer(128, 3);
        let w = synth::speech(4, 9000);
        assert_eq!(e.enhance(&request(w.clone(), None)).unwrap().0, e.enhance(&request(w.clone(), None)).unwrap().0);
        let sampled = |seed| {
            let mut r = request(w.clone(), None);
            r.policy = DecodePolicy::Sample {
                temperature: 1.0,
                top_k: 0,
                seed,
            };
            e.enhance_tokens(&r).unwrap()
        };
        assert_eq!(sampled(5), sampled(5));
    }

    #[test]
    fn oversized_chunk_is_a_config_error() {
        let e = enhancer(64, 4);
        let w = synth::speech(5, 20_000);
        assert!(matches!(e.enhance(&request(w.clone(), Some(5.0))), Err(Error::Config(_))));
        assert!(matches!(e.enhance(&request(w, Some(0.0))), Err(Error::Config(_))));
    }

    #[test]
    fn other_rates_are_resampled() {
        let e = enhancer(128, 5);
        let w = Waveform::new(synth::speech(6, 16_000).into_samples(), 16_000).unwrap();
        let (out, _) = e.enhance(&request(w, None)).unwrap();
        assert_eq!(out.sample_rate_hz(), CANONICAL_RATE);
        assert!((out.len() as i64 - 44_100).abs() <= 512);
    }

    #[test]
    fn early_eos_is_filled_with_zero_codes() {
        let mut e = enhancer(128, 6);
        // Constant hidden state (embeddings one-hot on dim 0, residual
        // branches silenced) and a head that strongly favours eos.
        let eos = e.layout.eos() as usize;
        let d = e.model.cfg.d_model;
        let p = &mut e.model.params;
        for (name, t) in p.names.iter().zip(p.data.iter_mut()) {
            if name == "tok_emb" {
                t.iter_mut().enumerate().for_each(|(i, x)| *x = if i % d == 0 { 1.0 } else { 0.0 });
            } else if name.ends_with(".wo") || name.ends_with(".w_down") {
                t.iter_mut().for_each(|x| *x = 0.0);
            } else if name == "head" {
                t.iter_mut().for_each(|x| *x = 0.0);
                t[eos] = 50.0;
            }
        }
        let w = synth::speech(7, 8192);
        let (out, rep) = e.enhance(&request(w, None)).unwrap();
        assert!(rep.early_stop);
        let c = &rep.chunks[0];
        assert_eq!(c.eos_position, Some(0));
        assert_eq!(c.filled_frames, c.n_frames);
        assert_eq!(out.len(), 8192);
        assert!(out.samples().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let codec = tiny_codec();
        let m = Model::init(tiny_model_cfg(99, 64), 0).unwrap();
        assert!(matches!(Enhancer::new(m, codec), Err(Error::Config(_))));
    }
}
