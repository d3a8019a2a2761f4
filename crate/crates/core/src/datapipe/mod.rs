//! Trajectories, token-probability representations and training-example
//! construction.
//!
//! Checkpoint indices are 0-based throughout: a trajectory with `T`
//! accuracies has checkpoints `0..T`.

mod examples;
pub mod files;
mod manifest;
mod store;

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use examples::{
    build_descriptors, make_training_examples, materialize, BuildOptions, ExampleDescriptor,
    Representation, RepresentationKind, TrainingExample, Variant,
};
pub use manifest::{
    load_dataset, read_manifest, resolve_token_files, write_manifest, Dataset, ManifestEntry,
};
pub use store::{CachedStore, FileLossStore, LossStore, MemoryLossStore, MIN_PROB};

/// Histogram resolution used by the histogram-difference representations.
pub const DEFAULT_BINS: usize = 64;

/// One training run evaluated on one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub run_id: String,
    pub task_id: String,
    /// FLOPs represented by one unit of gap. Metadata only; never a model input.
    pub compute_unit_flops: f64,
    pub accuracies: Vec<f64>,
    /// Per-checkpoint token-probability files, relative to the trajectory file.
    pub token_prob_files: Option<Vec<String>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.accuracies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accuracies.is_empty()
    }

    /// Checks `T >= 2`, accuracies in `[0, 1]` and one loss file per checkpoint.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.accuracies.len() < 2 {
            return Err(format!(
                "run {} has {} checkpoints, need at least 2",
                self.run_id,
                self.accuracies.len()
            ));
        }
        if let Some((i, y)) = self
            .accuracies
            .iter()
            .enumerate()
            .find(|(_, y)| !(0.0..=1.0).contains(*y))
        {
            return Err(format!("accuracy {y} at checkpoint {i} is outside [0, 1]"));
        }
        if !self.compute_unit_flops.is_finite() || self.compute_unit_flops < 0.0 {
            return Err(format!(
                "compute_unit_flops {} is not a nonnegative number",
                self.compute_unit_flops
            ));
        }
        if let Some(files) = &self.token_prob_files {
            if files.len() != self.accuracies.len() {
                return Err(format!(
                    "{} token probability files for {} checkpoints",
                    files.len(),
                    self.accuracies.len()
                ));
            }
        }
        Ok(())
    }
}

/// Alternating accuracies and forward gaps. `pairs[i].1` is the number of
/// compute units from element `i` to the next one; the gap of the last pair
/// is the distance to the prediction target.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSequence {
    pub pairs: Vec<(f64, u32)>,
}

impl ContextSequence {
    pub fn new(pairs: Vec<(f64, u32)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("context sequence is empty"));
        }
        for &(y, g) in &pairs {
            if !(0.0..=1.0).contains(&y) {
                return Err(Error::invalid(format!(
                    "context accuracy {y} outside [0, 1]"
                )));
            }
            if g == 0 {
                return Err(Error::invalid("context gaps must be at least 1"));
            }
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn target_gap(&self) -> u32 {
        self.pairs.last().map_or(1, |p| p.1)
    }

    /// Copy with the final gap replaced by `gap`.
    pub fn with_target_gap(&self, gap: u32) -> Self {
        let mut out = self.clone();
        if let Some(last) = out.pairs.last_mut() {
            last.1 = gap;
        }
        out
    }

    pub fn gap_sum(&self) -> u64 {
        self.pairs.iter().map(|p| u64::from(p.1)).sum()
    }

    /// Checkpoint index of every element, for a sequence whose first element
    /// is checkpoint 0.
    pub fn checkpoint_indices(&self) -> Vec<usize> {
        let mut at = 0usize;
        self.pairs
            .iter()
            .map(|&(_, g)| {
                let here = at;
                at += g as usize;
                here
            })
            .collect()
    }

    /// Checkpoint index of the last element, for a sequence starting at checkpoint 0.
    pub fn end_checkpoint(&self) -> usize {
        self.pairs[..self.pairs.len() - 1]
            .iter()
            .map(|p| p.1 as usize)
            .sum()
    }
}

/// Per-token probabilities at one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenProbVector {
    pub probs: Vec<f64>,
}

impl TokenProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::invalid(format!(
                "probability {p} at token {i} is outside [0, 1]"
            )));
        }
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Zero-pads or truncates to exactly `n` tokens. Returns the adjusted
    /// vector and whether any adjustment happened.
    pub fn fit_to(&self, n: usize) -> (Vec<f64>, bool) {
        let mut v = self.probs.clone();
        let changed = v.len() != n;
        v.resize(n, 0.0);
        (v, changed)
    }
}

/// Difference of two normalized histograms.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramDelta {
    pub delta: Vec<f64>,
}

impl HistogramDelta {
    pub fn bin_count(&self) -> usize {
        self.delta.len()
    }
}

/// `p_i = exp(-loss_i)`.
pub fn losses_to_probs(losses: &[f64]) -> Result<TokenProbVector> {
    let mut probs = Vec::with_capacity(losses.len());
    for (i, &l) in losses.iter().enumerate() {
        if !l.is_finite() || l < 0.0 {
            return Err(Error::invalid(format!(
                "loss {l} at token {i} must be finite and nonnegative"
            )));
        }
        probs.push((-l).exp());
    }
    Ok(TokenProbVector { probs })
}

/// Combines subword probabilities into one probability per whitespace word.
///
/// `word_spans` are half-open index ranges that must tile `0..len` in order.
pub fn aggregate_whitespace(
    subword_probs: &[f64],
    word_spans: &[Range<usize>],
) -> Result<TokenProbVector> {
    let mut expected = 0;
    let mut out = Vec::with_capacity(word_spans.len());
    for span in word_spans {
        if span.start != expected {
            return Err(Error::invalid(format!(
                "word span {span:?} does not start at {expected}: spans must tile the tokens"
            )));
        }
        if span.is_empty() {
            return Err(Error::invalid(format!("word span {span:?} is empty")));
        }
        if span.end > subword_probs.len() {
            return Err(Error::invalid(format!(
                "word span {span:?} exceeds {} tokens",
                subword_probs.len()
            )));
        }
        out.push(subword_probs[span.clone()].iter().product());
        expected = span.end;
    }
    if expected != subword_probs.len() {
        return Err(Error::invalid(format!(
            "word spans cover {expected} of {} tokens",
            subword_probs.len()
        )));
    }
    TokenProbVector::new(out)
}

pub fn average_prob(p: &TokenProbVector) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::invalid("cannot average an empty probability vector"));
    }
    Ok(p.probs.iter().sum::<f64>() / p.len() as f64)
}

/// 1-based bin `b` covers `((b-1)/B, b/B]`; bin 1 additionally takes `p = 0`.
fn bin_of(p: f64, bins: usize) -> usize {
    if p <= 0.0 {
        return 0;
    }
    let b = bins as f64;
    let mut k = ((p * b).ceil() as usize).clamp(1, bins);
    // guard against p*B rounding up across a bin edge
    if k > 1 && (k - 1) as f64 / b >= p {
        k -= 1;
    }
    if k < bins && p > k as f64 / b {
        k += 1;
    }
    k - 1
}

/// Fraction of tokens per probability bin.
pub fn histogram(p: &TokenProbVector, bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::invalid(format!(
            "histogram needs at least 2 bins, got {bins}"
        )));
    }
    if p.is_empty() {
        return Err(Error::invalid(
            "cannot histogram an empty probability vector",
        ));
    }
    let mut counts = vec![0usize; bins];
    for &x in &p.probs {
        counts[bin_of(x, bins)] += 1;
    }
    let n = p.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

pub fn hist_diff(h_now: &[f64], h_future: &[f64]) -> Result<HistogramDelta> {
    if h_now.len() != h_future.len() {
        return Err(Error::invalid(format!(
            "histogram lengths differ: {} vs {}",
            h_now.len(),
            h_future.len()
        )));
    }
    Ok(HistogramDelta {
        delta: h_future.iter().zip(h_now).map(|(f, n)| f - n).collect(),
    })
}

pub fn impute_unit_gaps(accuracies: &[f64]) -> Result<ContextSequence> {
    if accuracies.len() < 2 {
        return Err(Error::invalid("need at least 2 accuracies"));
    }
    ContextSequence::new(accuracies.iter().map(|&y| (y, 1)).collect())
}

/// Drops every element but the first with probability `p_drop`, adding a
/// dropped element's gap to the nearest kept element before it.
pub fn drop_with_absorption<R: Rng + ?Sized>(
    seq: &ContextSequence,
    p_drop: f64,
    rng: &mut R,
) -> Result<ContextSequence> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::invalid(format!(
            "drop probability {p_drop} outside [0, 1)"
        )));
    }
    let mut out: Vec<(f64, u32)> = Vec::with_capacity(seq.len());
    for (i, &(y, g)) in seq.pairs.iter().enumerate() {
        let drop = i > 0 && p_drop > 0.0 && rng.random::<f64>() < p_drop;
        match out.last_mut() {
            Some(prev) if drop => prev.1 += g,
            _ => out.push((y, g)),
        }
    }
    Ok(ContextSequence { pairs: out })
}

/// Keeps the newest `max_len` elements; the gaps of the removed prefix are
/// added to the new first element so the total gap is unchanged.
pub fn truncate_oldest(seq: &ContextSequence, max_len: usize) -> Result<ContextSequence> {
    if max_len == 0 {
        return Err(Error::invalid("cannot truncate a context to zero elements"));
    }
    if seq.len() <= max_len {
        return Ok(seq.clone());
    }
    let cut = seq.len() - max_len;
    let absorbed: u32 = seq.pairs[..cut].iter().map(|p| p.1).sum();
    let mut pairs = seq.pairs[cut..].to_vec();
    pairs[0].1 += absorbed;
    Ok(ContextSequence { pairs })
}

/// Observed prefix of a trajectory and its held-out remainder.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub context: ContextSequence,
    /// `(checkpoint index, accuracy)` of every held-out checkpoint.
    pub targets: Vec<(usize, f64)>,
}

impl Split {
    /// Index of the last observed checkpoint.
    pub fn anchor(&self) -> usize {
        self.context.len() - 1
    }
}

/// Observes the first `max(2, floor(frac * T))` checkpoints with unit gaps.
pub fn take_first_fraction(traj: &Trajectory, frac: f64) -> Result<Split> {
    let t = traj.len();
    if t < 3 {
        return Err(Error::invalid(format!(
            "run {} has {t} checkpoints, need at least 3",
            traj.run_id
        )));
    }
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::invalid(format!(
            "context fraction {frac} outside (0, 1)"
        )));
    }
    // the epsilon keeps e.g. 0.2 * 10 from flooring to 1
    let n = ((frac * t as f64 + 1e-9).floor() as usize).clamp(2, t - 1);
    let context = impute_unit_gaps(&traj.accuracies[..n])?;
    let targets = (n..t).map(|j| (j, traj.accuracies[j])).collect();
    Ok(Split { context, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn drop_absorbs_into_predecessor() {
        let seq = ContextSequence::new(vec![(0.1, 1), (0.2, 1), (0.3, 1)]).unwrap();
        // find a seed that drops exactly the middle element
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = drop_with_absorption(&seq, 0.5, &mut rng).unwrap();
            if out.pairs.len() == 2 && out.pairs[1].0 == 0.3 {
                assert_eq!(out.pairs, vec![(0.1, 2), (0.3, 1)]);
                return;
            }
        }
        panic!("no seed dropped the middle element");
    }

    #[test]
    fn end_checkpoint_counts_gaps() {
        let seq = ContextSequence::new(vec![(0.1, 2), (0.3, 1), (0.4, 7)]).unwrap();
        assert_eq!(seq.end_checkpoint(), 3);
        assert_eq!(seq.checkpoint_indices(), vec![0, 2, 3]);
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_of(0.0, 4), 0);
        assert_eq!(bin_of(0.25, 4), 0);
        assert_eq!(bin_of(0.2500001, 4), 1);
        assert_eq!(bin_of(1.0, 4), 3);
        assert_eq!(bin_of(0.3, 10), 2);
        assert_eq!(bin_of(0.7, 10), 6);
    }

    #[test]
    fn truncation_keeps_total_gap() {
        let seq = ContextSequence::new(vec![(0.1, 1), (0.2, 2), (0.3, 1), (0.4, 3)]).unwrap();
        let t = truncate_oldest(&seq, 2).unwrap();
        assert_eq!(t.pairs, vec![(0.3, 4), (0.4, 3)]);
        assert_eq!(t.gap_sum(), seq.gap_sum());
    }
}
