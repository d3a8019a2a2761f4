//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `NNCK`, `u32` version, `u64` length of a
//! UTF-8 JSON header, the header, then tensors until end of file, each as
//! `u32` name length, name bytes, `u32` rank, `u64` extents, `f64` values.

use std::path::Path;

use ndgrad::Tensor;
use serde::{Deserialize, Serialize};

use super::train::RunConfig;
use super::Forecaster;
use crate::error::{Error, Result};
use crate::fsutil;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: RunConfig,
    pub seed: u64,
}

pub fn encode_checkpoint(model: &Forecaster, config: &RunConfig, seed: u64) -> Result<Vec<u8>> {
    if &config.model != model.config() {
        return Err(Error::invalid("checkpoint config does not match the model"));
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        config: config.clone(),
        seed,
    })
    .expect("checkpoint header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, name, t) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_checkpoint(
    path: &Path,
    model: &Forecaster,
    config: &RunConfig,
    seed: u64,
) -> Result<()> {
    fsutil::atomic_write(path, &encode_checkpoint(model, config, seed)?)
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.at as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| self.fail(format!("{what} {v} exceeds the file size")))
    }
}

/// Parses a checkpoint, returning the model and its header.
pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<(Forecaster, CheckpointHeader)> {
    let mut r = Reader { path, bytes, at: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        r.at = 0;
        return Err(r.fail("bad magic, expected NNCK"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        r.at -= 4;
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.len("header length")?;
    let header_at = r.at;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(header_len, "header")?).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: (header_at + e.column().saturating_sub(1)) as u64,
            detail: format!("checkpoint header: {e}"),
        })?;
    let mut tensors = Vec::new();
    while r.at < bytes.len() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| r.fail("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.len("extent"))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
        let numel = numel
            .filter(|&n| n <= bytes.len() / 8)
            .ok_or_else(|| r.fail(format!("{name}: extents {shape:?} too large")))?;
        let raw = r.take(numel * 8, "tensor values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| r.fail(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    let model = Forecaster::from_tensors(header.config.model.clone(), tensors).map_err(|e| {
        Error::Validation {
            path: path.to_path_buf(),
            detail: e.to_string(),
        }
    })?;
    Ok((model, header))
}

pub fn read_checkpoint(path: &Path) -> Result<(Forecaster, CheckpointHeader)> {
    let bytes = fsutil::read(path)?;
    decode_checkpoint(path, &bytes)
}
