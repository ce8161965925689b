//! Time-major flattening of token grids into one vocabulary, training
//! sequences `[bos] noisy [start_clean] clean [eos]`, and the binary token
//! dataset format.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::codec::{CodecConfig, TokenGrid};
use crate::degrade::TaskLabel;
use crate::error::{Error, Result};
use crate::util::write_atomic;

pub const DATASET_MAGIC: &[u8; 4] = b"DSE1";
pub const DATASET_VERSION: u32 = 1;

/// Codebook-offset vocabulary: id `ℓ·K + c`, then four specials.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VocabLayout {
    pub n_codebooks: usize,
    pub codebook_size: usize,
}

impl VocabLayout {
    pub fn new(n_codebooks: usize, codebook_size: usize) -> Self {
        VocabLayout {
            n_codebooks,
            codebook_size,
        }
    }

    pub fn for_codec(cfg: &CodecConfig) -> Self {
        Self::new(cfg.n_codebooks, cfg.codebook_size)
    }

    pub fn base_size(&self) -> u32 {
        (self.n_codebooks * self.codebook_size) as u32
    }

    pub fn start_clean(&self) -> u32 {
        self.base_size()
    }

    pub fn bos(&self) -> u32 {
        self.base_size() + 1
    }

    pub fn eos(&self) -> u32 {
        self.base_size() + 2
    }

    pub fn pad(&self) -> u32 {
        self.base_size() + 3
    }

    pub fn vocab_size(&self) -> usize {
        self.base_size() as usize + 4
    }

    pub fn is_special(&self, id: u32) -> bool {
        id >= self.base_size()
    }

    pub fn token(&self, book: usize, code: u32) -> u32 {
        (book * self.codebook_size) as u32 + code
    }

    /// `(codebook, code)` for a base id.
    pub fn split(&self, id: u32) -> Option<(usize, u32)> {
        (!self.is_special(id)).then(|| {
            let k = self.codebook_size as u32;
            ((id / k) as usize, id % k)
        })
    }

    /// Ids admissible at flattened position `pos` of an audio stream.
    pub fn book_range(&self, pos: usize) -> std::ops::Range<u32> {
        let l = pos % self.n_codebooks;
        let k = self.codebook_size as u32;
        l as u32 * k..(l as u32 + 1) * k
    }

    /// Tokens needed for an example of `n_frames` frames.
    pub fn example_len(&self, n_frames: usize) -> usize {
        2 * n_frames * self.n_codebooks + 3
    }
}

pub fn flatten(grid: &TokenGrid, layout: &VocabLayout) -> Result<Vec<u32>> {
    if grid.n_codebooks() != layout.n_codebooks {
        return Err(Error::Config(format!(
            "grid has {} codebooks, layout {}",
            grid.n_codebooks(),
            layout.n_codebooks
        )));
    }
    grid.codes()
        .iter()
        .enumerate()
        .map(|(p, &c)| {
            if c as usize >= layout.codebook_size {
                return Err(Error::Index {
                    index: c as usize,
                    limit: layout.codebook_size,
                });
            }
            Ok(layout.token(p % layout.n_codebooks, c))
        })
        .collect()
}

/// Checks that position `p` of an audio stream holds a codebook-`p mod L`
/// token. Returns the first offending position.
pub fn validate_stream(ids: &[u32], layout: &VocabLayout) -> Result<()> {
    for (p, &id) in ids.iter().enumerate() {
        let expected = p % layout.n_codebooks;
        match layout.split(id) {
            Some((book, _)) if book == expected => {}
            _ => {
                return Err(Error::StreamCorruption {
                    position: p,
                    id,
                    expected,
                })
            }
        }
    }
    Ok(())
}

pub fn unflatten(ids: &[u32], layout: &VocabLayout) -> Result<TokenGrid> {
    if ids.len() % layout.n_codebooks != 0 {
        return Err(Error::Length(ids.len(), ids.len().next_multiple_of(layout.n_codebooks)));
    }
    validate_stream(ids, layout)?;
    let k = layout.codebook_size as u32;
    TokenGrid::new(
        ids.iter().map(|id| id % k).collect(),
        ids.len() / layout.n_codebooks,
        layout.n_codebooks,
    )
}

/// One training sequence plus routing metadata.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub ids: Vec<u32>,
    pub task_label: TaskLabel,
    /// Seed of the distortion chain that produced the noisy half.
    pub seed: u64,
}

impl TrainingExample {
    /// Frames per half, recovered from the sequence length.
    pub fn n_frames(&self, layout: &VocabLayout) -> usize {
        (self.ids.len().saturating_sub(3)) / (2 * layout.n_codebooks)
    }

    /// Index of the `start_clean` token.
    pub fn boundary(&self, layout: &VocabLayout) -> usize {
        1 + self.n_frames(layout) * layout.n_codebooks
    }

    /// Noisy conditioning prefix up to and including `start_clean`.
    pub fn prompt(&self, layout: &VocabLayout) -> &[u32] {
        &self.ids[..=self.boundary(layout)]
    }

    /// Clean target tokens, excluding `eos`.
    pub fn clean(&self, layout: &VocabLayout) -> &[u32] {
        let b = self.boundary(layout);
        &self.ids[b + 1..self.ids.len() - 1]
    }

    pub fn noisy(&self, layout: &VocabLayout) -> &[u32] {
        &self.ids[1..self.boundary(layout)]
    }
}

pub fn build_example(
    noisy: &TokenGrid,
    clean: &TokenGrid,
    layout: &VocabLayout,
    context_limit: usize,
    task_label: TaskLabel,
    seed: u64,
) -> Result<TrainingExample> {
    if noisy.n_frames() != clean.n_frames() {
        return Err(Error::Length(noisy.n_frames(), clean.n_frames()));
    }
    if noisy.n_frames() == 0 {
        return Err(Error::Data("example has no frames".into()));
    }
    let len = layout.example_len(noisy.n_frames());
    if len > context_limit {
        return Err(Error::ContextOverflow {
            len,
            limit: context_limit,
        });
    }
    let mut ids = Vec::with_capacity(len);
    ids.push(layout.bos());
    ids.extend(flatten(noisy, layout)?);
    ids.push(layout.start_clean());
    ids.extend(flatten(clean, layout)?);
    ids.push(layout.eos());
    Ok(TrainingExample { ids, task_label, seed })
}

/// Dataset header fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub n_codebooks: u32,
    pub codebook_size: u32,
    pub frame_rate_mhz: u32,
    pub vocab_size: u32,
    pub n_records: u64,
}

impl DatasetHeader {
    pub fn new(cfg: &CodecConfig, n_records: u64) -> Self {
        let layout = VocabLayout::for_codec(cfg);
        DatasetHeader {
            n_codebooks: cfg.n_codebooks as u32,
            codebook_size: cfg.codebook_size as u32,
            frame_rate_mhz: cfg.frame_rate_mhz(),
            vocab_size: layout.vocab_size() as u32,
            n_records,
        }
    }

    pub fn layout(&self) -> VocabLayout {
        VocabLayout::new(self.n_codebooks as usize, self.codebook_size as usize)
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(DATASET_MAGIC)?;
        for v in [DATASET_VERSION, self.n_codebooks, self.codebook_size, self.frame_rate_mhz, self.vocab_size] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.n_records.to_le_bytes())
    }
}

fn truncated(_: std::io::Error) -> Error {
    Error::Format("token dataset truncated".into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_records(w: &mut impl Write, header: &DatasetHeader, examples: &[TrainingExample]) -> std::io::Result<()> {
    assert_eq!(header.n_records, examples.len() as u64, "header record count");
    header.write_to(w)?;
    for ex in examples {
        w.write_all(&[ex.task_label.0])?;
        w.write_all(&(ex.ids.len() as u32).to_le_bytes())?;
        for id in &ex.ids {
            w.write_all(&id.to_le_bytes())?;
        }
        w.write_all(&ex.seed.to_le_bytes())?;
    }
    Ok(())
}

/// Writes a dataset atomically; the header count comes from `examples`.
pub fn write_dataset(path: impl AsRef<Path>, cfg: &CodecConfig, examples: &[TrainingExample]) -> Result<()> {
    let path = path.as_ref();
    let header = DatasetHeader::new(cfg, examples.len() as u64);
    write_atomic(path, |w| write_records(w, &header, examples).map_err(|e| Error::io(path, e)))
}

/// Streaming reader: the header is parsed up front, records on demand.
pub struct DatasetReader<R> {
    inner: R,
    header: DatasetHeader,
    remaining: u64,
}

impl DatasetReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufReader::new(f))
    }
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        inner.read_exact(&mut magic).map_err(truncated)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("bad token dataset magic".into()));
        }
        let version = read_u32(&mut inner)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let header = DatasetHeader {
            n_codebooks: read_u32(&mut inner)?,
            codebook_size: read_u32(&mut inner)?,
            frame_rate_mhz: read_u32(&mut inner)?,
            vocab_size: read_u32(&mut inner)?,
            n_records: read_u64(&mut inner)?,
        };
        if header.n_codebooks == 0 || header.codebook_size == 0 || header.vocab_size != header.layout().vocab_size() as u32 {
            return Err(Error::Format("inconsistent dataset header".into()));
        }
        Ok(DatasetReader {
            inner,
            remaining: header.n_records,
            header,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    fn read_record(&mut self) -> Result<TrainingExample> {
        let mut label = [0u8; 1];
        self.inner.read_exact(&mut label).map_err(truncated)?;
        let n = read_u32(&mut self.inner)? as usize;
        let mut raw = vec![0u8; n.checked_mul(4).ok_or_else(|| Error::Format("record too long".into()))?];
        self.inner.read_exact(&mut raw).map_err(truncated)?;
        let vocab = self.header.vocab_size;
        let ids: Vec<u32> = raw
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if let Some(bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Format(format!("token id {bad} outside vocabulary {vocab}")));
        }
        let seed = read_u64(&mut self.inner)?;
        Ok(TrainingExample {
            ids,
            task_label: TaskLabel(label[0]),
            seed,
        })
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<TrainingExample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        let rec = self.read_record();
        self.remaining = if rec.is_ok() { self.remaining - 1 } else { 0 };
        Some(rec)
    }
}

/// Reads a whole dataset; any truncation fails the call.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<TrainingExample>)> {
    let reader = DatasetReader::open(path)?;
    let header = *reader.header();
    let examples = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, examples))
}
