//! Checkpoint file: magic `DSE1CKPT`, u32 version, u32-length-prefixed JSON
//! metadata, u32 tensor count, tensors, u8 optimizer flag (followed by the
//! moment tensors and u64 optimizer step when set), then the u64 step
//! counter. Each tensor is u16 name length, name, u8 dtype (0 = f32), u8
//! rank, u64 dims, little-endian f32 data.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, Model, ModelConfig, OptimConfig, Params};
use crate::error::{Error, Result};
use crate::util::{hex, sha256, write_atomic};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSE1CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// JSON block stored with every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// "init", "stage1" or "stage2".
    pub stage: String,
    /// SHA-256 of the checkpoint this one was trained from.
    #[serde(default)]
    pub parent_sha256: Option<String>,
    /// Task being fine-tuned when the checkpoint was written (stage 2).
    #[serde(default)]
    pub task: Option<String>,
    #[serde(default)]
    pub optim: Option<OptimConfig>,
    /// Free-form trainer state needed to resume.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Params<f32>,
    pub optimizer: Option<AdamW<f32>>,
    pub step: u64,
}

fn write_tensors(w: &mut impl Write, p: &Params<f32>) -> std::io::Result<()> {
    w.write_all(&(p.names.len() as u32).to_le_bytes())?;
    for ((name, shape), data) in p.names.iter().zip(&p.shapes).zip(&p.data) {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F32, shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensors(&mut self) -> Result<Params<f32>> {
        let count = self.u32()? as usize;
        let mut p = Params {
            names: Vec::with_capacity(count.min(4096)),
            shapes: Vec::new(),
            data: Vec::new(),
        };
        for _ in 0..count {
            let len = self.u16()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = self.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("tensor {name}: unsupported dtype {dtype}")));
            }
            let rank = self.u8()? as usize;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.filter(|&n| n <= self.buf.len() / 4).ok_or_else(|| Error::Format(format!("tensor {name}: implausible shape")))?;
            let raw = self.take(n * 4)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerics(format!("non-finite value in tensor {name}")));
            }
            p.names.push(name);
            p.shapes.push(shape);
            p.data.push(data);
        }
        Ok(p)
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, stage: &str) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                model: model.cfg.clone(),
                stage: stage.to_string(),
                parent_sha256: None,
                task: None,
                optim: None,
                extra: serde_json::Value::Null,
            },
            params: model.params.clone(),
            optimizer: None,
            step: 0,
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::new(self.meta.model.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        Ok(buf)
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let json = serde_json::to_vec(&self.meta).expect("metadata serializes");
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        write_tensors(w, &self.params)?;
        match &self.optimizer {
            Some(opt) => {
                w.write_all(&[1])?;
                write_tensors(w, &opt.m)?;
                write_tensors(w, &opt.v)?;
                w.write_all(&opt.t.to_le_bytes())?;
            }
            None => w.write_all(&[0])?,
        }
        w.write_all(&self.step.to_le_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf: bytes };
        if c.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = c.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(c.take(len)?)?;
        meta.model.validate()?;
        let params = c.tensors()?;
        params.check_shapes(&meta.model)?;
        let optimizer = match c.u8()? {
            0 => None,
            1 => {
                let m = c.tensors()?;
                let v = c.tensors()?;
                m.check_shapes(&meta.model)?;
                v.check_shapes(&meta.model)?;
                let t = c.u64()?;
                Some(AdamW {
                    cfg: meta.optim.clone().unwrap_or_default(),
                    m,
                    v,
                    t,
                })
            }
            f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
        };
        let step = c.u64()?;
        if !c.buf.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            meta,
            params,
            optimizer,
            step,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_atomic(path, |w| self.write_to(w).map_err(|e| Error::io(path, e)))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn sha256_hex(&self) -> Result<String> {
        Ok(hex(&sha256(&self.to_bytes()?)))
    }
}
