//! Trajectory JSON files and binary token-probability files.
//!
//! Token-probability layout (little-endian): magic `NNSL`, `u32` version,
//! `u64` count, then `count` IEEE-754 single-precision values.

use std::path::{Path, PathBuf};

use super::{TokenProbVector, Trajectory};
use crate::error::{Error, Result};
use crate::fsutil;

pub const PROBS_MAGIC: &[u8; 4] = b"NNSL";
pub const PROBS_VERSION: u32 = 1;
const PROBS_HEADER: usize = 16;
/// Stored values may stray this far outside `[0, 1]` before being rejected.
const PROB_SLACK: f64 = 1e-6;
/// Suffix that marks trajectory files inside a directory.
pub const TRAJECTORY_SUFFIX: &str = ".traj.json";

pub fn encode_trajectory(traj: &Trajectory) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(traj).expect("trajectory serializes");
    s.push('\n');
    s.into_bytes()
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    traj.validate().map_err(|detail| Error::Validation {
        path: path.to_path_buf(),
        detail,
    })?;
    fsutil::atomic_write(path, &encode_trajectory(traj))
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let bytes = fsutil::read(path)?;
    let traj: Trajectory = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: json_offset(&bytes, e.line(), e.column()),
        detail: e.to_string(),
    })?;
    traj.validate().map_err(|detail| Error::Validation {
        path: path.to_path_buf(),
        detail,
    })?;
    Ok(traj)
}

/// Byte offset of a 1-based (line, column) position reported by serde_json.
fn json_offset(bytes: &[u8], line: usize, column: usize) -> u64 {
    let mut offset = 0usize;
    for (i, l) in bytes.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)) as u64;
        }
        offset += l.len() + 1;
    }
    bytes.len() as u64
}

/// Trajectory files directly inside `dir`, sorted by file name.
pub fn list_trajectories(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if name.to_string_lossy().ends_with(TRAJECTORY_SUFFIX) {
            paths.push(entry.path());
        }
    }
    paths.sort();
    Ok(paths)
}

/// Reads every trajectory file in `dir`, returning `(path, trajectory)` pairs.
pub fn read_trajectory_dir(dir: &Path) -> Result<Vec<(PathBuf, Trajectory)>> {
    list_trajectories(dir)?
        .into_iter()
        .map(|p| read_trajectory(&p).map(|t| (p, t)))
        .collect()
}

pub fn encode_token_probs(probs: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(PROBS_HEADER + 4 * probs.len());
    out.extend_from_slice(PROBS_MAGIC);
    out.extend_from_slice(&PROBS_VERSION.to_le_bytes());
    out.extend_from_slice(&(probs.len() as u64).to_le_bytes());
    for &p in probs {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

pub fn write_token_probs(path: &Path, probs: &TokenProbVector) -> Result<()> {
    fsutil::atomic_write(path, &encode_token_probs(&probs.probs))
}

pub fn decode_token_probs(path: &Path, bytes: &[u8]) -> Result<TokenProbVector> {
    let fail = |offset: usize, detail: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    if bytes.len() < PROBS_HEADER {
        return Err(fail(
            bytes.len(),
            format!("file is {} bytes, header needs {PROBS_HEADER}", bytes.len()),
        ));
    }
    if &bytes[..4] != PROBS_MAGIC {
        return Err(fail(0, "bad magic, expected NNSL".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != PROBS_VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let expected = (count as u128) * 4 + PROBS_HEADER as u128;
    if expected != bytes.len() as u128 {
        return Err(fail(
            bytes.len().min(8),
            format!(
                "count {count} needs {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let mut probs = Vec::with_capacity(count as usize);
    for (i, chunk) in bytes[PROBS_HEADER..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !(v >= -PROB_SLACK && v <= 1.0 + PROB_SLACK) {
            return Err(fail(
                PROBS_HEADER + 4 * i,
                format!("probability {v} outside [0, 1]"),
            ));
        }
        probs.push(v.clamp(0.0, 1.0));
    }
    Ok(TokenProbVector { probs })
}

pub fn read_token_probs(path: &Path) -> Result<TokenProbVector> {
    let bytes = fsutil::read(path)?;
    decode_token_probs(path, &bytes)
}
