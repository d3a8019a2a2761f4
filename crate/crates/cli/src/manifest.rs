//! Run manifests: what a command read and wrote, with content hashes.

use std::fs;
use std::path::{Component, Path, PathBuf};

use nnsl::{fsutil, Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// File name of the manifest `synth` writes inside its output directory.
pub const SYNTH_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct FileDigest {
    /// The path as given on the command line.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn new(command: &str, config: Option<&Path>, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config: config.map(display),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(digest(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(digest(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self).expect("manifest serializes");
        json.push('\n');
        fsutil::atomic_write(path, json.as_bytes())
    }
}

fn display(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Hash of a file's bytes, or for a directory, of the sorted listing of
/// `<file hash>  <relative path>` lines over every file beneath it
/// (run manifests excluded).
fn digest(path: &Path) -> Result<FileDigest> {
    let meta = fs::metadata(path).map_err(|e| io(path, e))?;
    let sha256 = if meta.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        let mut listing = String::new();
        for rel in files {
            let bytes = fsutil::read(&path.join(&rel))?;
            listing.push_str(&format!("{}  {rel}\n", hex(&Sha256::digest(&bytes))));
        }
        hex(&Sha256::digest(listing.as_bytes()))
    } else {
        hex(&Sha256::digest(fsutil::read(path)?))
    };
    Ok(FileDigest {
        path: display(path),
        sha256,
    })
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| io(dir, e))? {
        let p = entry.map_err(|e| io(dir, e))?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
            continue;
        }
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if name == SYNTH_MANIFEST || name.ends_with(".run.json") || name.ends_with(".tmp") {
            continue;
        }
        let rel = p.strip_prefix(root).expect("walked from root");
        let parts: Vec<String> = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        out.push(parts.join("/"));
    }
    Ok(())
}

/// Manifest path written next to an output file: `<out>.run.json`.
pub fn sidecar(out: &Path) -> PathBuf {
    with_suffix(out, ".run.json")
}

pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// `target` expressed relative to the directory `base`, with `/` separators.
pub fn relative_path(target: &Path, base: &Path) -> Result<String> {
    let target = fs::canonicalize(target).map_err(|e| io(target, e))?;
    let base = fs::canonicalize(base).map_err(|e| io(base, e))?;
    let t: Vec<Component> = target.components().collect();
    let b: Vec<Component> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut parts: Vec<String> = vec!["..".to_string(); b.len() - common];
    parts.extend(
        t[common..]
            .iter()
            .map(|c| c.as_os_str().to_string_lossy().into_owned()),
    );
    Ok(parts.join("/"))
}
