//! Held-out evaluation: absolute error, interval coverage, pairwise ranking
//! and bootstrap intervals over forecasts of the unobserved checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{
    materialize, take_first_fraction, ExampleDescriptor, LossStore, Split, Trajectory,
};
use crate::error::{Error, Result};
use crate::forecaster::Forecaster;
use crate::fsutil;
use crate::logfit::{evaluate_logistic, LogisticParams};

/// Differences below this count as ties.
pub const TIE_EPS: f64 = 1e-12;
pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_LEVEL: f64 = 0.95;

pub fn mae(preds: &[f64], truths: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::invalid(format!(
            "mae needs equal nonempty inputs, got {} and {}",
            preds.len(),
            truths.len()
        )));
    }
    Ok(preds
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / preds.len() as f64)
}

/// Fraction of truths inside their closed interval.
pub fn calibration_coverage(intervals: &[(f64, f64)], truths: &[f64]) -> Result<f64> {
    if intervals.is_empty() || intervals.len() != truths.len() {
        return Err(Error::invalid(format!(
            "coverage needs equal nonempty inputs, got {} and {}",
            intervals.len(),
            truths.len()
        )));
    }
    if let Some((lo, hi)) = intervals.iter().find(|(lo, hi)| !(lo <= hi)) {
        return Err(Error::invalid(format!("interval [{lo}, {hi}] is reversed")));
    }
    let hits = intervals
        .iter()
        .zip(truths)
        .filter(|((lo, hi), y)| lo <= *y && *y <= hi)
        .count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() || resamples == 0 {
        return Err(Error::invalid(
            "bootstrap needs values and at least one resample",
        ));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((percentile(&means, tail), percentile(&means, 1.0 - tail)))
}

/// Linear interpolation between order statistics.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Final-checkpoint forecast of one model configuration on one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalForecast {
    pub config: String,
    pub task: String,
    /// Training-configuration family, consulted by the grouped pairing rules.
    pub group: String,
    pub pred: f64,
    pub truth: f64,
}

/// Which pairs of configurations sharing a task are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingRule {
    #[default]
    AllPairs,
    SameGroup,
    CrossGroup,
}

impl PairingRule {
    fn admits(self, x: &FinalForecast, y: &FinalForecast) -> bool {
        match self {
            PairingRule::AllPairs => true,
            PairingRule::SameGroup => x.group == y.group,
            PairingRule::CrossGroup => x.group != y.group,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub task: String,
    pub first: String,
    pub second: String,
    /// 1 for the right order, 0 for the wrong one, 0.5 for a predicted tie.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub accuracy: f64,
    pub pairs: Vec<PairScore>,
}

/// Scores every admitted unordered pair of distinct configurations within a
/// task on whether the forecasts order them like the truths do. Pairs whose
/// truths tie are skipped.
pub fn ranking_accuracy(finals: &[FinalForecast], rule: PairingRule) -> Result<Ranking> {
    let mut by_task: BTreeMap<&str, Vec<&FinalForecast>> = BTreeMap::new();
    for f in finals {
        by_task.entry(&f.task).or_default().push(f);
    }
    let mut pairs = Vec::new();
    for (task, group) in by_task {
        for (i, x) in group.iter().enumerate() {
            for y in &group[i + 1..] {
                if x.config == y.config || !rule.admits(x, y) {
                    continue;
                }
                let truth = x.truth - y.truth;
                if truth.abs() < TIE_EPS {
                    continue;
                }
                let pred = x.pred - y.pred;
                let score = if pred.abs() < TIE_EPS {
                    0.5
                } else if (pred > 0.0) == (truth > 0.0) {
                    1.0
                } else {
                    0.0
                };
                pairs.push(PairScore {
                    task: task.to_string(),
                    first: x.config.clone(),
                    second: y.config.clone(),
                    score,
                });
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::invalid("no comparable pairs of configurations"));
    }
    let accuracy = pairs.iter().map(|p| p.score).sum::<f64>() / pairs.len() as f64;
    Ok(Ranking { accuracy, pairs })
}

/// Point forecast and its `[q_lo, q_hi]` interval for one held-out checkpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Forecast {
    pub pred: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Anything that forecasts the held-out part of a split.
pub trait Predictor {
    /// One forecast per entry of `split.targets`, in order.
    fn forecast(&self, traj: &Trajectory, split: &Split) -> Result<Vec<Forecast>>;
}

/// Limits a store to checkpoints up to `limit`, so a forecast cannot read
/// the future by accident.
struct Observed<'a> {
    inner: &'a dyn LossStore,
    limit: usize,
}

impl Observed<'_> {
    fn check(&self, traj: &Trajectory, checkpoint: usize) -> Result<()> {
        if checkpoint > self.limit {
            return Err(Error::MissingOracle(format!(
                "run {} checkpoint {checkpoint} lies after the observed prefix",
                traj.run_id
            )));
        }
        Ok(())
    }
}

impl LossStore for Observed<'_> {
    fn token_probs(
        &self,
        traj: &Trajectory,
        checkpoint: usize,
    ) -> Result<crate::datapipe::TokenProbVector> {
        self.check(traj, checkpoint)?;
        self.inner.token_probs(traj, checkpoint)
    }
    fn mean_prob(&self, traj: &Trajectory, checkpoint: usize) -> Result<f64> {
        self.check(traj, checkpoint)?;
        self.inner.mean_prob(traj, checkpoint)
    }
    fn mean_loss(&self, traj: &Trajectory, checkpoint: usize) -> Result<f64> {
        self.check(traj, checkpoint)?;
        self.inner.mean_loss(traj, checkpoint)
    }
    fn histogram(&self, traj: &Trajectory, checkpoint: usize, bins: usize) -> Result<Vec<f64>> {
        self.check(traj, checkpoint)?;
        self.inner.histogram(traj, checkpoint, bins)
    }
}

/// A trained forecaster. Variants that consume future histograms read them
/// from `oracle`; all others only see the observed prefix of `store`.
pub struct NeuralPredictor<'a> {
    pub model: &'a Forecaster,
    pub store: &'a dyn LossStore,
    pub oracle: Option<&'a dyn LossStore>,
}

impl Predictor for NeuralPredictor<'_> {
    fn forecast(&self, traj: &Trajectory, split: &Split) -> Result<Vec<Forecast>> {
        let anchor = split.anchor();
        let kind = self.model.representation_kind();
        let bins = self.model.config().encoder.bins;
        let needs_future = self.model.variant().needs_future();
        let observed = Observed {
            inner: self.store,
            limit: anchor,
        };
        let store: &dyn LossStore = if needs_future {
            self.oracle.ok_or_else(|| {
                Error::MissingOracle(format!(
                    "{} forecasts need future histograms",
                    self.model.variant()
                ))
            })?
        } else {
            &observed
        };
        let mut reps = Vec::new();
        for &(target, _) in &split.targets {
            let desc = ExampleDescriptor {
                run: 0,
                checkpoints: (0..=anchor).collect(),
                target,
            };
            reps.push(materialize(&desc, traj, kind, store, bins)?.representation);
            if !needs_future {
                // the representation depends only on the observed prefix
                break;
            }
        }
        let gaps: Vec<u32> = split
            .targets
            .iter()
            .map(|&(j, _)| (j - anchor) as u32)
            .collect();
        if gaps.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self
            .model
            .forecast_horizons(&split.context, &gaps, &reps)?
            .into_iter()
            .map(|q| {
                let (pred, lo, hi) = q.point_and_interval();
                Forecast { pred, lo, hi }
            })
            .collect())
    }
}

/// Per-task logistic fits fed ground-truth future mean losses. The
/// interval collapses onto the point forecast.
pub struct LogisticPredictor<'a> {
    pub fits: &'a HashMap<String, LogisticParams>,
    pub oracle: Option<&'a dyn LossStore>,
}

impl Predictor for LogisticPredictor<'_> {
    fn forecast(&self, traj: &Trajectory, split: &Split) -> Result<Vec<Forecast>> {
        let oracle = self.oracle.ok_or_else(|| {
            Error::MissingOracle("logistic forecasts need future mean losses".into())
        })?;
        let params = self
            .fits
            .get(&traj.task_id)
            .ok_or_else(|| Error::Data(format!("no logistic fit for task {}", traj.task_id)))?;
        let losses = split
            .targets
            .iter()
            .map(|&(j, _)| oracle.mean_loss(traj, j))
            .collect::<Result<Vec<_>>>()?;
        Ok(evaluate_logistic(params, &losses, split.targets.len())?
            .into_iter()
            .map(|pred| Forecast {
                pred,
                lo: pred,
                hi: pred,
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub run: String,
    pub task: String,
    /// Checkpoints between the last observed one and the target.
    pub horizon: u32,
    pub checkpoint: usize,
    pub pred: f64,
    pub lo: f64,
    pub hi: f64,
    pub truth: f64,
    pub abs_err: f64,
}

/// Forecasts every held-out checkpoint of every run from its first `frac`.
pub fn evaluate(
    predictor: &dyn Predictor,
    trajs: &[Trajectory],
    frac: f64,
) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for traj in trajs {
        let split = take_first_fraction(traj, frac)?;
        let forecasts = predictor.forecast(traj, &split)?;
        if forecasts.len() != split.targets.len() {
            return Err(Error::Data(format!(
                "run {}: {} forecasts for {} targets",
                traj.run_id,
                forecasts.len(),
                split.targets.len()
            )));
        }
        let anchor = split.anchor();
        for (&(checkpoint, truth), f) in split.targets.iter().zip(forecasts) {
            out.push(EvalRecord {
                run: traj.run_id.clone(),
                task: traj.task_id.clone(),
                horizon: (checkpoint - anchor) as u32,
                checkpoint,
                pred: f.pred,
                lo: f.lo,
                hi: f.hi,
                truth,
                abs_err: (f.pred - truth).abs(),
            });
        }
    }
    Ok(out)
}

/// MAE at each context fraction, which must increase strictly inside (0, 1).
pub fn context_sweep(
    predictor: &dyn Predictor,
    trajs: &[Trajectory],
    fractions: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if fractions.is_empty() || !fractions.iter().all(|&f| f > 0.0 && f < 1.0) {
        return Err(Error::invalid("fractions must lie inside (0, 1)"));
    }
    if !fractions.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::invalid("fractions must be strictly increasing"));
    }
    fractions
        .iter()
        .map(|&f| {
            let records = evaluate(predictor, trajs, f)?;
            Ok((f, records_mae(&records)?))
        })
        .collect()
}

fn records_mae(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("no evaluation records"));
    }
    Ok(records.iter().map(|r| r.abs_err).sum::<f64>() / records.len() as f64)
}

/// Last held-out checkpoint of each run, as ranking input.
pub fn final_forecasts(records: &[EvalRecord]) -> Vec<FinalForecast> {
    let mut last: BTreeMap<(&str, &str), &EvalRecord> = BTreeMap::new();
    for r in records {
        let e = last.entry((&r.run, &r.task)).or_insert(r);
        if r.checkpoint > e.checkpoint {
            *e = r;
        }
    }
    last.into_values()
        .map(|r| FinalForecast {
            config: r.run.clone(),
            task: r.task.clone(),
            group: String::new(),
            pred: r.pred,
            truth: r.truth,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingSummary {
    pub accuracy: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub context_fraction: f64,
    pub mae: f64,
    pub mae_per_task: BTreeMap<String, f64>,
    pub mae_per_horizon: BTreeMap<u32, f64>,
    pub coverage: f64,
    /// Absent when no two runs share a task.
    pub ranking: Option<RankingSummary>,
    pub records: Vec<EvalRecord>,
}

fn mean_by<K: Ord>(records: &[EvalRecord], key: impl Fn(&EvalRecord) -> K) -> BTreeMap<K, f64> {
    let mut acc: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(key(r)).or_default();
        e.0 += r.abs_err;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}

impl EvalReport {
    /// Aggregates raw records. `seed` drives the ranking bootstrap.
    pub fn from_records(
        method: &str,
        context_fraction: f64,
        records: Vec<EvalRecord>,
        seed: u64,
    ) -> Result<Self> {
        let mae = records_mae(&records)?;
        let intervals: Vec<(f64, f64)> = records.iter().map(|r| (r.lo, r.hi)).collect();
        let truths: Vec<f64> = records.iter().map(|r| r.truth).collect();
        let coverage = calibration_coverage(&intervals, &truths)?;
        let ranking = match ranking_accuracy(&final_forecasts(&records), PairingRule::AllPairs) {
            Ok(r) => {
                let scores: Vec<f64> = r.pairs.iter().map(|p| p.score).collect();
                let (ci_lo, ci_hi) = bootstrap_ci(&scores, DEFAULT_RESAMPLES, DEFAULT_LEVEL, seed)?;
                Some(RankingSummary {
                    accuracy: r.accuracy,
                    ci_lo,
                    ci_hi,
                    pairs: r.pairs.len(),
                })
            }
            Err(_) => None,
        };
        Ok(Self {
            method: method.to_string(),
            context_fraction,
            mae,
            mae_per_task: mean_by(&records, |r| r.task.clone()),
            mae_per_horizon: mean_by(&records, |r| r.horizon),
            coverage,
            ranking,
            records,
        })
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,task,horizon,pred,lo,hi,truth,abs_err\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.run, r.task, r.horizon, r.pred, r.lo, r.hi, r.truth, r.abs_err
            );
        }
        out
    }

    pub fn write(&self, json: &Path, csv: Option<&Path>) -> Result<()> {
        fsutil::atomic_write(json, &self.to_json())?;
        if let Some(csv) = csv {
            fsutil::atomic_write(csv, self.to_csv().as_bytes())?;
        }
        Ok(())
    }
}
