//! JSON-lines dataset manifests: one example descriptor per line, pointing
//! into trajectory files rather than inlining data.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{files, ExampleDescriptor, Trajectory, Variant};
use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Trajectory file, relative to the manifest's directory.
    pub trajectory: String,
    pub variant: Variant,
    /// `[checkpoint, gap]` per observed element; the last gap reaches the target.
    pub context: Vec<[usize; 2]>,
    pub target: usize,
}

impl ManifestEntry {
    pub fn new(trajectory: String, variant: Variant, desc: &ExampleDescriptor) -> Self {
        let context = desc
            .checkpoints
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                [
                    c,
                    desc.checkpoints.get(i + 1).copied().unwrap_or(desc.target) - c,
                ]
            })
            .collect();
        Self {
            trajectory,
            variant,
            context,
            target: desc.target,
        }
    }

    fn descriptor(&self, run: usize) -> std::result::Result<ExampleDescriptor, String> {
        let checkpoints: Vec<usize> = self.context.iter().map(|c| c[0]).collect();
        for (i, c) in self.context.iter().enumerate() {
            let next = checkpoints.get(i + 1).copied().unwrap_or(self.target);
            if c[1] == 0 || c[0] + c[1] != next {
                return Err(format!(
                    "gap {} after checkpoint {} does not reach {next}",
                    c[1], c[0]
                ));
            }
        }
        Ok(ExampleDescriptor {
            run,
            checkpoints,
            target: self.target,
        })
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
        out.push('\n');
    }
    fsutil::atomic_write(path, out.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let bytes = fsutil::read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: e.valid_up_to() as u64,
        detail: "manifest is not UTF-8".into(),
    })?;
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end();
        if !body.is_empty() {
            let entry = serde_json::from_str(body).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                offset: (offset + e.column().saturating_sub(1)) as u64,
                detail: e.to_string(),
            })?;
            entries.push(entry);
        }
        offset += line.len();
    }
    Ok(entries)
}

/// Rewrites relative token-probability paths to be relative to `dir`'s parent
/// context, i.e. usable from the current working directory.
pub fn resolve_token_files(traj: &mut Trajectory, dir: &Path) {
    if let Some(files) = &mut traj.token_prob_files {
        for f in files.iter_mut() {
            *f = dir.join(&*f).to_string_lossy().into_owned();
        }
    }
}

/// Trajectories and example descriptors referenced by a manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub variant: Variant,
    /// Trajectory file of each run, as written in the manifest.
    pub sources: Vec<String>,
    /// Trajectories with token-probability paths resolved against their file.
    pub trajectories: Vec<Trajectory>,
    pub examples: Vec<ExampleDescriptor>,
}

pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let entries = read_manifest(manifest)?;
    let first = entries.first().ok_or_else(|| Error::Validation {
        path: manifest.to_path_buf(),
        detail: "manifest has no examples".into(),
    })?;
    let variant = first.variant;
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut sources = Vec::new();
    let mut trajectories = Vec::new();
    let mut examples = Vec::with_capacity(entries.len());
    for (line, e) in entries.iter().enumerate() {
        let invalid = |detail: String| Error::Validation {
            path: manifest.to_path_buf(),
            detail: format!("line {}: {detail}", line + 1),
        };
        if e.variant != variant {
            return Err(invalid(format!(
                "variant {} differs from {variant}",
                e.variant
            )));
        }
        let run = match index.get(&e.trajectory) {
            Some(&r) => r,
            None => {
                let path: PathBuf = base.join(&e.trajectory);
                let mut traj = files::read_trajectory(&path)?;
                resolve_token_files(&mut traj, path.parent().unwrap_or(Path::new("")));
                index.insert(e.trajectory.clone(), trajectories.len());
                sources.push(e.trajectory.clone());
                trajectories.push(traj);
                trajectories.len() - 1
            }
        };
        let desc = e.descriptor(run).map_err(&invalid)?;
        desc.validate(&trajectories[run]).map_err(&invalid)?;
        examples.push(desc);
    }
    Ok(Dataset {
        variant,
        sources,
        trajectories,
        examples,
    })
}
