//! Binary model checkpoints.
//!
//! Layout (all integers little-endian `u32`): magic `GSRM`, format version,
//! config length and JSON config, tensor count, then per tensor the name
//! length and UTF-8 name, rows, cols and row-major `f32` data.

use std::path::Path;

use ndarray::Array2;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::ParamStore;

pub const MAGIC: &[u8; 4] = b"GSRM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = serde_json::to_vec(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + cfg.len() + 4 * self.params.n_scalars());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, len_u32(cfg.len())?);
        out.extend_from_slice(&cfg);
        put_u32(&mut out, len_u32(self.params.len())?);
        for (name, t) in self.params.iter() {
            put_u32(&mut out, len_u32(name.len())?);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, len_u32(t.nrows())?);
            put_u32(&mut out, len_u32(t.ncols())?);
            for v in t.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let n = r.u32()? as usize;
        let config: ModelConfig =
            serde_json::from_slice(r.take(n)?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let size = rows
                .checked_mul(cols)
                .and_then(|s| s.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
            let data: Vec<f64> = r
                .take(size)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            params.insert(name, Array2::from_shape_vec((rows, cols), data).expect("sized above"));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Model::new(config.clone())?.check_params(&params)?;
        Ok(Self { config, params })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, config: &ModelConfig, params: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    let ckpt = Checkpoint {
        config: config.clone(),
        params: params.clone(),
    };
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} does not fit in 32 bits")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
