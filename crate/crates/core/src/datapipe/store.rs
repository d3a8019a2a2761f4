use std::cell::RefCell;
use std::collections::HashMap;
use std::io::ErrorKind;
use std::path::PathBuf;

use super::{average_prob, files, histogram, TokenProbVector, Trajectory};
use crate::error::{Error, Result};

/// Probability floor used when converting back to losses, so a stored zero
/// yields a large finite loss instead of infinity.
pub const MIN_PROB: f64 = 1e-12;

/// Source of per-checkpoint token probabilities for a run.
///
/// Token probabilities belong to the run, not the task, so implementations
/// key on `traj.run_id` and the checkpoint index.
pub trait LossStore {
    fn token_probs(&self, traj: &Trajectory, checkpoint: usize) -> Result<TokenProbVector>;

    fn mean_prob(&self, traj: &Trajectory, checkpoint: usize) -> Result<f64> {
        average_prob(&self.token_probs(traj, checkpoint)?)
    }

    /// Mean token loss `mean(-ln p)`.
    fn mean_loss(&self, traj: &Trajectory, checkpoint: usize) -> Result<f64> {
        let p = self.token_probs(traj, checkpoint)?;
        if p.is_empty() {
            return Err(Error::Data(format!(
                "run {} checkpoint {checkpoint}: no tokens",
                traj.run_id
            )));
        }
        Ok(p.probs.iter().map(|&x| -x.max(MIN_PROB).ln()).sum::<f64>() / p.len() as f64)
    }

    fn histogram(&self, traj: &Trajectory, checkpoint: usize, bins: usize) -> Result<Vec<f64>> {
        histogram(&self.token_probs(traj, checkpoint)?, bins)
    }
}

impl<S: LossStore + ?Sized> LossStore for &S {
    fn token_probs(&self, traj: &Trajectory, checkpoint: usize) -> Result<TokenProbVector> {
        (**self).token_probs(traj, checkpoint)
    }
    fn mean_prob(&self, traj: &Trajectory, checkpoint: usize) -> Result<f64> {
        (**self).mean_prob(traj, checkpoint)
    }
    fn mean_loss(&self, traj: &Trajectory, checkpoint: usize) -> Result<f64> {
        (**self).mean_loss(traj, checkpoint)
    }
    fn histogram(&self, traj: &Trajectory, checkpoint: usize, bins: usize) -> Result<Vec<f64>> {
        (**self).histogram(traj, checkpoint, bins)
    }
}

/// Reads the files named in `token_prob_files`, resolved against `root`.
#[derive(Clone, Debug)]
pub struct FileLossStore {
    root: PathBuf,
}

impl FileLossStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_for(&self, traj: &Trajectory, checkpoint: usize) -> Result<PathBuf> {
        let files = traj.token_prob_files.as_ref().ok_or_else(|| {
            Error::Data(format!(
                "run {} checkpoint {checkpoint}: trajectory lists no token probability files",
                traj.run_id
            ))
        })?;
        let name = files.get(checkpoint).ok_or_else(|| {
            Error::Data(format!(
                "run {} has no checkpoint {checkpoint}",
                traj.run_id
            ))
        })?;
        Ok(self.root.join(name))
    }
}

impl LossStore for FileLossStore {
    fn token_probs(&self, traj: &Trajectory, checkpoint: usize) -> Result<TokenProbVector> {
        let path = self.path_for(traj, checkpoint)?;
        files::read_token_probs(&path).map_err(|e| match e {
            Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => {
                Error::Data(format!(
                    "run {} checkpoint {checkpoint}: missing token probability file {}",
                    traj.run_id,
                    path.display()
                ))
            }
            other => other,
        })
    }
}

/// Token probabilities held in memory, keyed by run id and checkpoint.
#[derive(Clone, Debug, Default)]
pub struct MemoryLossStore {
    probs: HashMap<(String, usize), TokenProbVector>,
}

impl MemoryLossStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, run_id: &str, checkpoint: usize, probs: TokenProbVector) {
        self.probs.insert((run_id.to_string(), checkpoint), probs);
    }
}

impl LossStore for MemoryLossStore {
    fn token_probs(&self, traj: &Trajectory, checkpoint: usize) -> Result<TokenProbVector> {
        self.probs
            .get(&(traj.run_id.clone(), checkpoint))
            .cloned()
            .ok_or_else(|| {
                Error::Data(format!(
                    "run {} checkpoint {checkpoint}: no token probabilities",
                    traj.run_id
                ))
            })
    }
}

#[derive(Clone, Copy)]
struct Summary {
    mean_prob: f64,
    mean_loss: f64,
}

/// Memoizes per-checkpoint summaries (means and histograms) of an inner store.
/// Raw token vectors are passed through uncached.
pub struct CachedStore<S> {
    inner: S,
    summaries: RefCell<HashMap<(String, usize), Summary>>,
    histograms: RefCell<HashMap<(String, usize, usize), Vec<f64>>>,
}

impl<S: LossStore> CachedStore<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            summaries: RefCell::default(),
            histograms: RefCell::default(),
        }
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }

    fn summary(&self, traj: &Trajectory, checkpoint: usize) -> Result<Summary> {
        let key = (traj.run_id.clone(), checkpoint);
        if let Some(s) = self.summaries.borrow().get(&key) {
            return Ok(*s);
        }
        let p = self.inner.token_probs(traj, checkpoint)?;
        let mean_prob = average_prob(&p)?;
        let mean_loss =
            p.probs.iter().map(|&x| -x.max(MIN_PROB).ln()).sum::<f64>() / p.len() as f64;
        let s = Summary {
            mean_prob,
            mean_loss,
        };
        self.summaries.borrow_mut().insert(key, s);
        Ok(s)
    }
}

impl<S: LossStore> LossStore for CachedStore<S> {
    fn token_probs(&self, traj: &Trajectory, checkpoint: usize) -> Result<TokenProbVector> {
        self.inner.token_probs(traj, checkpoint)
    }

    fn mean_prob(&self, traj: &Trajectory, checkpoint: usize) -> Result<f64> {
        Ok(self.summary(traj, checkpoint)?.mean_prob)
    }

    fn mean_loss(&self, traj: &Trajectory, checkpoint: usize) -> Result<f64> {
        Ok(self.summary(traj, checkpoint)?.mean_loss)
    }

    fn histogram(&self, traj: &Trajectory, checkpoint: usize, bins: usize) -> Result<Vec<f64>> {
        let key = (traj.run_id.clone(), checkpoint, bins);
        if let Some(h) = self.histograms.borrow().get(&key) {
            return Ok(h.clone());
        }
        let h = self.inner.histogram(traj, checkpoint, bins)?;
        self.histograms.borrow_mut().insert(key, h.clone());
        Ok(h)
    }
}
