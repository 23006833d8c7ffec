//! Versioned little-endian binary checkpoints.
//!
//! ```text
//! magic "ANSEGCKP" | u32 version | u64 len + config text | u64 step
//! u64 tensor count, then per tensor:
//!   u32 len + name | u8 trainable | u32 rank | u64 dims.. | f64 data..
//! ```
//!
//! Identical models serialise to identical bytes.

use std::path::Path;

use crate::backbone::{build_model, GroupedModel};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::params::ParamStore;
use crate::tensor::ParamTensor;

const MAGIC: &[u8; 8] = b"ANSEGCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub model: GroupedModel,
}

pub fn to_bytes(config: &RunConfig, step: usize, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config.to_text();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(step as u64).to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.trainable as u8);
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u64()? as usize;
    let config = RunConfig::from_text(&r.string(n)?)?;
    let step = r.u64()? as usize;
    let count = r.u64()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = r.string(n)?;
        let trainable = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(ParamTensor::new(name, &shape, data, trainable)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut model = build_model(&config.model, config.model_seed)?;
    model.store.load_from(&store)?;
    for (_, p) in model.store.iter() {
        if store.by_name(&p.name).is_some_and(|q| q.trainable != p.trainable) {
            return Err(Error::Checkpoint(format!("{}: trainable flag differs from model", p.name)));
        }
    }
    Ok(Checkpoint { config, step, model })
}

pub fn save(path: &Path, config: &RunConfig, step: usize, store: &ParamStore) -> Result<()> {
    std::fs::write(path, to_bytes(config, step, store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
