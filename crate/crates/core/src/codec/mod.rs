//! Toy neural-audio-codec stand-in: an orthogonal lapped transform followed
//! by residual vector quantization with `L` codebooks of `K` codes.
//!
//! Code 0 of every book is the zero vector and never moves, so the residual
//! norm of any frame can only shrink from one stage to the next, and digital
//! silence encodes to all-zero indices.

mod kmeans;
mod transform;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, KMeansParams};
pub use transform::Transform;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::util::{sha256, write_atomic};
use kmeans::{nearest, sq_norm};

pub const SAMPLE_RATE: u32 = crate::audio::CANONICAL_RATE;
pub const CODEBOOK_MAGIC: &[u8; 4] = b"RVQ1";
pub const CODEBOOK_VERSION: u32 = 1;
pub const DEFAULT_PROJECTION_SEED: u64 = 0x5EED_DAC5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub n_codebooks: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub projection_seed: u64,
}

impl CodecConfig {
    /// L = 4, K = 64 at hop 512 (about 86 frames per second).
    pub fn desk() -> Self {
        CodecConfig {
            frame_len: 1024,
            hop: 512,
            n_codebooks: 4,
            codebook_size: 64,
            latent_dim: 512,
            projection_seed: DEFAULT_PROJECTION_SEED,
        }
    }

    /// L = 9, K = 1024 at hop 512.
    pub fn paper() -> Self {
        CodecConfig {
            n_codebooks: 9,
            codebook_size: 1024,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !self.frame_len.is_power_of_two() || self.frame_len < 4 {
            return bad("frame_len must be a power of two");
        }
        if self.hop * 2 != self.frame_len {
            return bad("hop must be frame_len / 2");
        }
        if self.n_codebooks == 0 {
            return bad("need at least one codebook");
        }
        if self.codebook_size < 2 || self.codebook_size > u16::MAX as usize {
            return bad("codebook size must be in 2..=65535");
        }
        if self.latent_dim == 0 || self.latent_dim > self.hop {
            return bad("latent_dim must be in 1..=hop");
        }
        Ok(())
    }

    pub fn frame_rate_hz(&self) -> f64 {
        SAMPLE_RATE as f64 / self.hop as f64
    }

    /// Frame rate in millihertz, as stored in dataset headers.
    pub fn frame_rate_mhz(&self) -> u32 {
        (SAMPLE_RATE as u64 * 1000 / self.hop as u64) as u32
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.hop)
    }
}

/// Row-major `n_frames × dim` latent frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatrix {
    data: Vec<f64>,
    n_frames: usize,
    dim: usize,
}

impl FrameMatrix {
    pub fn new(data: Vec<f64>, n_frames: usize, dim: usize) -> Self {
        assert_eq!(data.len(), n_frames * dim, "frame matrix shape");
        FrameMatrix { data, n_frames, dim }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        &self.data[f * self.dim..(f + 1) * self.dim]
    }

    /// Stacks several matrices of the same dimension.
    pub fn concat(parts: &[FrameMatrix]) -> Result<Self> {
        let dim = parts.first().map(|p| p.dim).unwrap_or(0);
        if parts.iter().any(|p| p.dim != dim) {
            return Err(Error::Data("frame dimensions differ".into()));
        }
        let data: Vec<f64> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        let n = parts.iter().map(|p| p.n_frames).sum();
        Ok(FrameMatrix::new(data, n, dim))
    }
}

/// `n_frames × n_codebooks` code indices, row-major by frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    codes: Vec<u32>,
    n_frames: usize,
    n_codebooks: usize,
}

impl TokenGrid {
    pub fn new(codes: Vec<u32>, n_frames: usize, n_codebooks: usize) -> Result<Self> {
        if codes.len() != n_frames * n_codebooks {
            return Err(Error::Length(codes.len(), n_frames * n_codebooks));
        }
        Ok(TokenGrid {
            codes,
            n_frames,
            n_codebooks,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_codebooks(&self) -> usize {
        self.n_codebooks
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn get(&self, frame: usize, book: usize) -> u32 {
        self.codes[frame * self.n_codebooks + book]
    }

    pub fn row(&self, frame: usize) -> &[u32] {
        &self.codes[frame * self.n_codebooks..(frame + 1) * self.n_codebooks]
    }

    /// Frames `range` as a new grid.
    pub fn slice_frames(&self, range: std::ops::Range<usize>) -> TokenGrid {
        TokenGrid {
            codes: self.codes[range.start * self.n_codebooks..range.end * self.n_codebooks].to_vec(),
            n_frames: range.len(),
            n_codebooks: self.n_codebooks,
        }
    }

    pub fn concat(parts: &[TokenGrid]) -> Result<TokenGrid> {
        let l = parts.first().map(|p| p.n_codebooks).unwrap_or(0);
        if parts.iter().any(|p| p.n_codebooks != l) {
            return Err(Error::Data("codebook counts differ".into()));
        }
        Ok(TokenGrid {
            codes: parts.iter().flat_map(|p| p.codes.iter().copied()).collect(),
            n_frames: parts.iter().map(|p| p.n_frames).sum(),
            n_codebooks: l,
        })
    }
}

/// `L` codebooks of `K` code vectors each, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct RvqCodebooks {
    n_codebooks: usize,
    codebook_size: usize,
    dim: usize,
    books: Vec<f64>,
    pub trained_on: [u8; 32],
}

impl RvqCodebooks {
    pub fn new(n_codebooks: usize, codebook_size: usize, dim: usize, books: Vec<f64>, trained_on: [u8; 32]) -> Result<Self> {
        if books.len() != n_codebooks * codebook_size * dim {
            return Err(Error::Length(books.len(), n_codebooks * codebook_size * dim));
        }
        if books.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics("codebook".into()));
        }
        for l in 0..n_codebooks {
            if books[l * codebook_size * dim..][..dim].iter().any(|&v| v != 0.0) {
                return Err(Error::Data(format!("code 0 of book {l} is not the zero vector")));
            }
        }
        Ok(RvqCodebooks {
            n_codebooks,
            codebook_size,
            dim,
            books,
            trained_on,
        })
    }

    pub fn n_codebooks(&self) -> usize {
        self.n_codebooks
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn book(&self, l: usize) -> &[f64] {
        let n = self.codebook_size * self.dim;
        &self.books[l * n..(l + 1) * n]
    }

    pub fn code(&self, l: usize, c: usize) -> &[f64] {
        &self.book(l)[c * self.dim..(c + 1) * self.dim]
    }

    /// Greedy residual quantization of one frame. Returns the codes and the
    /// residual norms `‖r_0‖, …, ‖r_L‖` (the first is the input norm).
    pub fn quantize_frame(&self, x: &[f64]) -> (Vec<u32>, Vec<f64>) {
        let mut r = x.to_vec();
        let mut codes = Vec::with_capacity(self.n_codebooks);
        let mut norms = Vec::with_capacity(self.n_codebooks + 1);
        norms.push(sq_norm(&r).sqrt());
        for l in 0..self.n_codebooks {
            let (j, _) = nearest(&r, self.book(l), self.dim);
            r.iter_mut().zip(self.code(l, j)).for_each(|(a, c)| *a -= c);
            codes.push(j as u32);
            norms.push(sq_norm(&r).sqrt());
        }
        (codes, norms)
    }

    pub fn encode_frames(&self, frames: &FrameMatrix) -> Result<TokenGrid> {
        if frames.dim() != self.dim {
            return Err(Error::Config(format!("frame dim {} vs codebook dim {}", frames.dim(), self.dim)));
        }
        let codes = (0..frames.n_frames())
            .flat_map(|f| self.quantize_frame(frames.frame(f)).0)
            .collect();
        TokenGrid::new(codes, frames.n_frames(), self.n_codebooks)
    }

    /// Sum of the first `stages` code vectors of every frame.
    pub fn reconstruct(&self, grid: &TokenGrid, stages: usize) -> Result<FrameMatrix> {
        if grid.n_codebooks() != self.n_codebooks {
            return Err(Error::Config(format!(
                "grid has {} codebooks, codec has {}",
                grid.n_codebooks(),
                self.n_codebooks
            )));
        }
        let stages = stages.min(self.n_codebooks);
        let mut data = vec![0.0; grid.n_frames() * self.dim];
        for f in 0..grid.n_frames() {
            let out = &mut data[f * self.dim..(f + 1) * self.dim];
            for l in 0..stages {
                let c = grid.get(f, l) as usize;
                if c >= self.codebook_size {
                    return Err(Error::Index {
                        index: c,
                        limit: self.codebook_size,
                    });
                }
                out.iter_mut().zip(self.code(l, c)).for_each(|(o, v)| *o += v);
            }
        }
        Ok(FrameMatrix::new(data, grid.n_frames(), self.dim))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_atomic(path, |w| self.write_to(w).map_err(|e| Error::io(path, e)))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        for v in [CODEBOOK_VERSION, self.n_codebooks as u32, self.codebook_size as u32, self.dim as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in &self.books {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.write_all(&self.trained_on)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let short = |_| Error::Format("codebook file truncated".into());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(short)?;
        if &magic != CODEBOOK_MAGIC {
            return Err(Error::Format("bad codebook magic".into()));
        }
        let mut u = [0u8; 4];
        let mut next = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut u).map_err(short)?;
            Ok(u32::from_le_bytes(u))
        };
        let version = next(r)?;
        if version != CODEBOOK_VERSION {
            return Err(Error::Format(format!("unsupported codebook version {version}")));
        }
        let (l, k, d) = (next(r)? as usize, next(r)? as usize, next(r)? as usize);
        if l == 0 || k < 2 || d == 0 || l.saturating_mul(k).saturating_mul(d) > 1 << 28 {
            return Err(Error::Format(format!("implausible codebook shape {l}x{k}x{d}")));
        }
        let mut raw = vec![0u8; l * k * d * 4];
        r.read_exact(&mut raw).map_err(short)?;
        let books = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let mut trained_on = [0u8; 32];
        r.read_exact(&mut trained_on).map_err(short)?;
        RvqCodebooks::new(l, k, d, books, trained_on)
    }
}

/// Fingerprint of a set of training frames.
pub fn frames_fingerprint(frames: &FrameMatrix) -> [u8; 32] {
    let bytes: Vec<u8> = frames.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256(&bytes)
}

/// Fits one k-means codebook per stage on the residual left by the previous
/// stages. Code vectors are rounded to 32-bit precision so that saved
/// codebooks reload bit-exactly.
pub fn train_rvq(frames: &FrameMatrix, cfg: &CodecConfig, iters: usize, seed: u64) -> Result<RvqCodebooks> {
    cfg.validate()?;
    let (n, dim, k) = (frames.n_frames(), frames.dim(), cfg.codebook_size);
    if dim != cfg.latent_dim {
        return Err(Error::Config(format!("frames have dim {dim}, config {}", cfg.latent_dim)));
    }
    if n < 4 * k {
        return Err(Error::Data(format!("{n} frames is fewer than 4·K = {}", 4 * k)));
    }
    let mut residual = frames.data().to_vec();
    let mut books = Vec::with_capacity(cfg.n_codebooks * k * dim);
    for l in 0..cfg.n_codebooks {
        let params = KMeansParams {
            k,
            iters,
            seed: crate::util::mix_seed(seed, l as u64),
            frozen_zero: true,
        };
        let mut book = kmeans(&residual, dim, &params);
        book.iter_mut().for_each(|v| *v = *v as f32 as f64);
        for r in residual.chunks_exact_mut(dim) {
            let (j, _) = nearest(r, &book, dim);
            r.iter_mut().zip(&book[j * dim..(j + 1) * dim]).for_each(|(a, c)| *a -= c);
        }
        books.extend_from_slice(&book);
    }
    RvqCodebooks::new(cfg.n_codebooks, k, dim, books, frames_fingerprint(frames))
}

/// Analyzes every waveform with the configured transform and fits the
/// residual codebooks on the pooled frames.
pub fn train_on_waves(waves: &[Waveform], cfg: &CodecConfig, iters: usize, seed: u64) -> Result<Codec> {
    let transform = Transform::new(cfg)?;
    let mats = crate::util::par_map(waves, |w| {
        check_rate(w)?;
        transform.analyze(w)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let frames = FrameMatrix::concat(&mats)?;
    Codec::new(cfg.clone(), train_rvq(&frames, cfg, iters, seed)?)
}

/// Transform plus trained codebooks: waveforms in, token grids out, and back.
#[derive(Clone, Debug)]
pub struct Codec {
    cfg: CodecConfig,
    transform: Transform,
    books: RvqCodebooks,
}

impl Codec {
    pub fn new(cfg: CodecConfig, books: RvqCodebooks) -> Result<Self> {
        cfg.validate()?;
        if books.n_codebooks() != cfg.n_codebooks || books.codebook_size() != cfg.codebook_size || books.dim() != cfg.latent_dim {
            return Err(Error::Config("codebooks do not match codec config".into()));
        }
        Ok(Codec {
            transform: Transform::new(&cfg)?,
            cfg,
            books,
        })
    }

    /// Loads a codebook file. The file records L, K and the latent size; the
    /// remaining transform parameters come from `base` (normally
    /// [`CodecConfig::desk`], which shares the standard 1024/512 framing
    /// with the paper-scale profile).
    pub fn load(path: impl AsRef<Path>, base: &CodecConfig) -> Result<Self> {
        let books = RvqCodebooks::read(path)?;
        let cfg = CodecConfig {
            n_codebooks: books.n_codebooks(),
            codebook_size: books.codebook_size(),
            latent_dim: books.dim(),
            ..base.clone()
        };
        Self::new(cfg, books)
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn books(&self) -> &RvqCodebooks {
        &self.books
    }

    pub fn transform(&self) -> &Transform {
        &self.transform
    }

    pub fn analyze(&self, w: &Waveform) -> Result<FrameMatrix> {
        check_rate(w)?;
        self.transform.analyze(w)
    }

    pub fn encode(&self, w: &Waveform) -> Result<TokenGrid> {
        self.books.encode_frames(&self.analyze(w)?)
    }

    pub fn decode(&self, grid: &TokenGrid) -> Result<Waveform> {
        self.decode_stages(grid, self.cfg.n_codebooks)
    }

    /// Decodes using only the first `stages` codebooks.
    pub fn decode_stages(&self, grid: &TokenGrid, stages: usize) -> Result<Waveform> {
        self.transform.synthesize(&self.books.reconstruct(grid, stages)?)
    }

    /// Encode then decode, trimmed to the input length.
    pub fn roundtrip(&self, w: &Waveform) -> Result<Waveform> {
        let mut out = self.decode(&self.encode(w)?)?;
        out.fit_to_len(w.len());
        Ok(out)
    }
}

fn check_rate(w: &Waveform) -> Result<()> {
    if w.sample_rate_hz() != SAMPLE_RATE {
        return Err(Error::Config(format!(
            "codec expects {SAMPLE_RATE} Hz input, got {} Hz",
            w.sample_rate_hz()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_frames(n: usize, dim: usize, seed: u64) -> FrameMatrix {
        let mut rng = crate::util::rng_from_seed(seed);
        FrameMatrix::new((0..n * dim).map(|_| rng.sample(StandardNormal)).collect(), n, dim)
    }

    fn tiny_cfg() -> CodecConfig {
        CodecConfig {
            frame_len: 32,
            hop: 16,
            n_codebooks: 3,
            codebook_size: 8,
            latent_dim: 16,
            projection_seed: 1,
        }
    }

    fn tiny_books() -> RvqCodebooks {
        train_rvq(&random_frames(200, 16, 1), &tiny_cfg(), 10, 3).unwrap()
    }

    #[test]
    fn profiles_validate() {
        CodecConfig::desk().validate().unwrap();
        CodecConfig::paper().validate().unwrap();
        assert!((CodecConfig::desk().frame_rate_hz() - 86.13).abs() < 0.01);
        assert_eq!(CodecConfig::desk().frame_rate_mhz(), 86_132);
        let bad = CodecConfig { hop: 300, ..CodecConfig::desk() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn training_is_deterministic_with_zero_codes() {
        let a = tiny_books();
        assert_eq!(a, tiny_books());
        for l in 0..3 {
            assert!(a.code(l, 0).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn insufficient_frames() {
        let r = train_rvq(&random_frames(31, 16, 1), &tiny_cfg(), 5, 0);
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn exact_code_match_then_zero_codes() {
        let books = tiny_books();
        let x = books.code(0, 5).to_vec();
        let (codes, norms) = books.quantize_frame(&x);
        assert_eq!(codes, vec![5, 0, 0]);
        assert_eq!(norms[1], 0.0);
    }

    #[test]
    fn zero_frame_encodes_to_zero_codes() {
        let (codes, _) = tiny_books().quantize_frame(&[0.0; 16]);
        assert_eq!(codes, vec![0, 0, 0]);
    }

    #[test]
    fn training_residual_energy_decreases_by_stage() {
        let frames = random_frames(400, 16, 7);
        let books = train_rvq(&frames, &tiny_cfg(), 15, 3).unwrap();
        let held = random_frames(300, 16, 8);
        let mut per_stage = vec![0.0; 4];
        for f in 0..held.n_frames() {
            let (_, norms) = books.quantize_frame(held.frame(f));
            for (acc, n) in per_stage.iter_mut().zip(&norms) {
                *acc += n * n;
            }
        }
        assert!(per_stage.windows(2).all(|w| w[1] <= w[0]), "{per_stage:?}");
        assert!(per_stage[3] < per_stage[0]);
    }

    #[test]
    fn file_roundtrip_and_corruption() {
        let books = tiny_books();
        let mut buf = Vec::new();
        books.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"RVQ1");
        assert_eq!(buf.len(), 4 + 16 + 3 * 8 * 16 * 4 + 32);
        assert_eq!(RvqCodebooks::read_from(&mut buf.as_slice()).unwrap(), books);
        assert!(matches!(RvqCodebooks::read_from(&mut &buf[..buf.len() - 1]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(RvqCodebooks::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn out_of_range_code_rejected() {
        let books = tiny_books();
        let grid = TokenGrid::new(vec![0, 8, 0], 1, 3).unwrap();
        assert!(matches!(books.reconstruct(&grid, 3), Err(Error::Index { .. })));
    }

    #[test]
    fn zero_grid_decodes_to_silence() {
        let cfg = tiny_cfg();
        let codec = Codec::new(cfg, tiny_books()).unwrap();
        let grid = TokenGrid::new(vec![0; 5 * 3], 5, 3).unwrap();
        let w = codec.decode(&grid).unwrap();
        assert_eq!(w.len(), 5 * 16);
        assert!(w.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn partial_stage_error_non_increasing() {
        let cfg = tiny_cfg();
        let codec = Codec::new(cfg, tiny_books()).unwrap();
        let mut rng = crate::util::rng_from_seed(4);
        let w = Waveform::new((0..160).map(|_| rng.gen_range(-0.5..0.5)).collect(), 44100).unwrap();
        let grid = codec.encode(&w).unwrap();
        let errs: Vec<f64> = (0..=3)
            .map(|s| {
                let y = codec.decode_stages(&grid, s).unwrap();
                w.samples().iter().zip(y.samples()).map(|(a, b)| (a - b).powi(2)).sum()
            })
            .collect();
        assert!(errs.windows(2).all(|p| p[1] <= p[0] + 1e-12), "{errs:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn residual_norms_never_grow(seed in any::<u64>(), scale in 0.01f64..10.0) {
            let books = tiny_books();
            let f = random_frames(1, 16, seed);
            let x: Vec<f64> = f.data().iter().map(|v| v * scale).collect();
            let (_, norms) = books.quantize_frame(&x);
            prop_assert!(norms.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
