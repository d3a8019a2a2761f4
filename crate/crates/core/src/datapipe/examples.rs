use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    drop_with_absorption, hist_diff, impute_unit_gaps, ContextSequence, HistogramDelta, LossStore,
    TokenProbVector, Trajectory,
};
use crate::error::{Error, Result};

/// Forecasting model family. Each variant consumes one kind of
/// validation-loss representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Convolutional encoder over the token probabilities at the last context checkpoint.
    NeuNeu,
    /// Mean-pooled projection of the per-checkpoint average probabilities.
    Average,
    /// MLP over the histogram change between the last context checkpoint and the target.
    HistDiff,
    /// Accuracy context only.
    NoLoss,
    /// Standalone MLP mapping the histogram change to an accuracy change.
    DiffProbe,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::NeuNeu,
        Variant::Average,
        Variant::HistDiff,
        Variant::NoLoss,
        Variant::DiffProbe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NeuNeu => "neuneu",
            Variant::Average => "average",
            Variant::HistDiff => "histdiff",
            Variant::NoLoss => "noloss",
            Variant::DiffProbe => "diffprobe",
        }
    }

    pub fn representation(self) -> RepresentationKind {
        match self {
            Variant::NeuNeu => RepresentationKind::TokenProbs,
            Variant::Average => RepresentationKind::AvgProbSequence,
            Variant::HistDiff | Variant::DiffProbe => RepresentationKind::HistDelta,
            Variant::NoLoss => RepresentationKind::None,
        }
    }

    /// Whether the representation looks at the target checkpoint.
    pub fn needs_future(self) -> bool {
        self.representation() == RepresentationKind::HistDelta
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RepresentationKind {
    TokenProbs,
    AvgProbSequence,
    HistDelta,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Representation {
    TokenProbs(TokenProbVector),
    AvgProbSequence(Vec<f64>),
    HistDelta(HistogramDelta),
    None,
}

impl Representation {
    pub fn kind(&self) -> RepresentationKind {
        match self {
            Representation::TokenProbs(_) => RepresentationKind::TokenProbs,
            Representation::AvgProbSequence(_) => RepresentationKind::AvgProbSequence,
            Representation::HistDelta(_) => RepresentationKind::HistDelta,
            Representation::None => RepresentationKind::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    /// Context whose final gap is the distance to the target.
    pub context: ContextSequence,
    pub representation: Representation,
    pub target_accuracy: f64,
}

/// Compact reference to a training example: which run, which checkpoints
/// are observed, and which checkpoint is the target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExampleDescriptor {
    pub run: usize,
    /// Observed checkpoint indices, strictly increasing, starting at 0.
    pub checkpoints: Vec<usize>,
    pub target: usize,
}

impl ExampleDescriptor {
    pub fn anchor(&self) -> usize {
        *self.checkpoints.last().expect("descriptor has checkpoints")
    }

    pub fn target_gap(&self) -> u32 {
        (self.target - self.anchor()) as u32
    }

    pub fn context(&self, traj: &Trajectory) -> ContextSequence {
        let pairs = self
            .checkpoints
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let next = self.checkpoints.get(i + 1).copied().unwrap_or(self.target);
                (traj.accuracies[c], (next - c) as u32)
            })
            .collect();
        ContextSequence { pairs }
    }

    pub fn validate(&self, traj: &Trajectory) -> std::result::Result<(), String> {
        if self.checkpoints.is_empty() {
            return Err("descriptor has no context checkpoints".into());
        }
        if !self.checkpoints.windows(2).all(|w| w[0] < w[1]) {
            return Err(format!(
                "context checkpoints {:?} are not increasing",
                self.checkpoints
            ));
        }
        if self.target <= self.anchor() || self.target >= traj.len() {
            return Err(format!(
                "target {} must lie after checkpoint {} and before {}",
                self.target,
                self.anchor(),
                traj.len()
            ));
        }
        Ok(())
    }
}

fn representation_for(
    traj: &Trajectory,
    anchor: usize,
    target: usize,
    kind: RepresentationKind,
    store: &dyn LossStore,
    bins: usize,
) -> Result<Representation> {
    Ok(match kind {
        RepresentationKind::TokenProbs => {
            Representation::TokenProbs(store.token_probs(traj, anchor)?)
        }
        RepresentationKind::AvgProbSequence => Representation::AvgProbSequence(
            (0..=anchor)
                .map(|t| store.mean_prob(traj, t))
                .collect::<Result<_>>()?,
        ),
        RepresentationKind::HistDelta => {
            let now = store.histogram(traj, anchor, bins)?;
            let future = store.histogram(traj, target, bins)?;
            Representation::HistDelta(hist_diff(&now, &future)?)
        }
        RepresentationKind::None => Representation::None,
    })
}

/// Builds the example a descriptor points to.
pub fn materialize(
    desc: &ExampleDescriptor,
    traj: &Trajectory,
    kind: RepresentationKind,
    store: &dyn LossStore,
    bins: usize,
) -> Result<TrainingExample> {
    desc.validate(traj)
        .map_err(|e| Error::Data(format!("run {}: {e}", traj.run_id)))?;
    Ok(TrainingExample {
        context: desc.context(traj),
        representation: representation_for(traj, desc.anchor(), desc.target, kind, store, bins)?,
        target_accuracy: traj.accuracies[desc.target],
    })
}

/// One example per checkpoint after the end of `seq`.
///
/// `seq` must start at checkpoint 0 (as produced by imputation and dropping);
/// its end checkpoint is recovered from the gaps.
pub fn make_training_examples(
    seq: &ContextSequence,
    traj: &Trajectory,
    kind: RepresentationKind,
    store: &dyn LossStore,
    bins: usize,
) -> Result<Vec<TrainingExample>> {
    let anchor = seq.end_checkpoint();
    let t = traj.len();
    if anchor + 1 >= t {
        return Err(Error::invalid(format!(
            "context ends at checkpoint {anchor}; run {} has no later checkpoint",
            traj.run_id
        )));
    }
    (anchor + 1..t)
        .map(|j| {
            Ok(TrainingExample {
                context: seq.with_target_gap((j - anchor) as u32),
                representation: representation_for(traj, anchor, j, kind, store, bins)?,
                target_accuracy: traj.accuracies[j],
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BuildOptions {
    pub drop_p: f64,
    /// Independently drawn drop masks per trajectory.
    pub masks: usize,
    /// Keep at most this many examples per trajectory (seeded subsample).
    pub max_per_run: Option<usize>,
    pub seed: u64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            drop_p: 0.4,
            masks: 8,
            max_per_run: None,
            seed: 0,
        }
    }
}

/// Draws drop masks over every trajectory and enumerates all
/// (observed prefix, future target) examples.
///
/// Run `r` draws from its own ChaCha stream, so adding runs never changes
/// the examples of earlier ones.
pub fn build_descriptors(
    trajs: &[Trajectory],
    opts: &BuildOptions,
) -> Result<Vec<ExampleDescriptor>> {
    let mut out = Vec::new();
    for (r, traj) in trajs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(r as u64);
        let full = impute_unit_gaps(&traj.accuracies)?;
        let t = traj.len();
        let mut run_examples = Vec::new();
        for _ in 0..opts.masks {
            let kept = drop_with_absorption(&full, opts.drop_p, &mut rng)?.checkpoint_indices();
            for k in 0..kept.len() {
                let anchor = kept[k];
                for target in anchor + 1..t {
                    run_examples.push(ExampleDescriptor {
                        run: r,
                        checkpoints: kept[..=k].to_vec(),
                        target,
                    });
                }
            }
        }
        match opts.max_per_run {
            Some(cap) if run_examples.len() > cap => {
                let mut picked = sample(&mut rng, run_examples.len(), cap).into_vec();
                picked.sort_unstable();
                out.extend(picked.into_iter().map(|i| run_examples[i].clone()));
            }
            _ => out.extend(run_examples),
        }
    }
    Ok(out)
}
