//! Seeded synthetic training runs: accuracy curves of several shapes and
//! token-probability streams driven by a latent capability.
//!
//! Capability rises ahead of accuracy, so token probabilities at an early
//! checkpoint carry information about accuracy later in the run. Over a
//! middle band of capability the mean token probability is flat while the
//! mixture shape keeps changing; runs in that band can only be told apart
//! by the distribution, not by its average.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datapipe::{files, LossStore, TokenProbVector, Trajectory};
use crate::error::{Error, Result};
use crate::fsutil;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Saturating,
    Plateau,
    Inverse,
    UShaped,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Saturating,
        Family::Plateau,
        Family::Inverse,
        Family::UShaped,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Saturating => "saturating",
            Family::Plateau => "plateau",
            Family::Inverse => "inverse",
            Family::UShaped => "u_shaped",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown family {s:?}")))
    }
}

/// Two-component Beta mixture whose weight and component means are smooth
/// functions of capability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenModel {
    /// Beta concentration `alpha + beta` of each component.
    pub concentration: f64,
    /// Distance between the two component means.
    pub separation: f64,
    /// Weight of the upper component at capability 0 and 1.
    pub weight_range: (f64, f64),
    /// Mixture mean at capability 0, inside the flat band, and at capability 1.
    pub mean_start: f64,
    pub mean_plateau: f64,
    pub mean_end: f64,
    /// Capability interval over which the mixture mean stays at `mean_plateau`.
    pub flat_band: (f64, f64),
    /// Consecutive tokens share one mixture component over spans of this
    /// length, like tokens of one document sharing its difficulty.
    pub segment_len: usize,
}

impl Default for TokenModel {
    fn default() -> Self {
        Self {
            concentration: 40.0,
            separation: 0.5,
            weight_range: (0.05, 0.95),
            mean_start: 0.3,
            mean_plateau: 0.5,
            mean_end: 0.7,
            flat_band: (0.1, 0.85),
            segment_len: 16,
        }
    }
}

/// Mixture parameters at one capability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mixture {
    pub upper_weight: f64,
    pub lower_mean: f64,
    pub upper_mean: f64,
    pub concentration: f64,
}

impl Mixture {
    pub fn mean(&self) -> f64 {
        (1.0 - self.upper_weight) * self.lower_mean + self.upper_weight * self.upper_mean
    }

    pub fn variance(&self) -> f64 {
        let second = |m: f64| m * (1.0 - m) / (self.concentration + 1.0) + m * m;
        let w = self.upper_weight;
        let m = self.mean();
        (1.0 - w) * second(self.lower_mean) + w * second(self.upper_mean) - m * m
    }
}

impl TokenModel {
    pub fn mean(&self, capability: f64) -> f64 {
        let c = capability.clamp(0.0, 1.0);
        let (lo, hi) = self.flat_band;
        self.mean_plateau - (self.mean_plateau - self.mean_start) * smoothstep((lo - c) / lo)
            + (self.mean_end - self.mean_plateau) * smoothstep((c - hi) / (1.0 - hi))
    }

    pub fn mixture(&self, capability: f64) -> Mixture {
        let c = capability.clamp(0.0, 1.0);
        let (w0, w1) = self.weight_range;
        let w = w0 + (w1 - w0) * c;
        let lower = self.mean(c) - w * self.separation;
        Mixture {
            upper_weight: w,
            lower_mean: lower,
            upper_mean: lower + self.separation,
            concentration: self.concentration,
        }
    }

    /// Two capabilities inside the flat band with equal mean and clearly
    /// different variance.
    pub fn matched_mean_pair(&self) -> (f64, f64) {
        let (lo, hi) = self.flat_band;
        (lo + 0.02, 0.5 * (lo + hi) + 0.025)
    }

    pub fn in_flat_band(&self, capability: f64) -> bool {
        (self.flat_band.0..=self.flat_band.1).contains(&capability)
    }

    fn validate(&self) -> Result<()> {
        if self.segment_len == 0 {
            return Err(Error::invalid("segment length must be at least 1"));
        }
        for c in [0.0, self.flat_band.0, self.flat_band.1, 1.0] {
            let m = self.mixture(c);
            if !(m.lower_mean > 0.0 && m.upper_mean < 1.0) {
                return Err(Error::invalid(format!(
                    "token model puts a component mean outside (0, 1) at capability {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Draws `n` token probabilities at the given capability.
pub fn gen_token_probs(
    model: &TokenModel,
    capability: f64,
    n: usize,
    seed: u64,
) -> Result<TokenProbVector> {
    if n == 0 {
        return Err(Error::invalid("token count must be at least 1"));
    }
    model.validate()?;
    let m = model.mixture(capability);
    let beta = |mean: f64| {
        Beta::new(mean * m.concentration, (1.0 - mean) * m.concentration)
            .map_err(|e| Error::invalid(format!("beta component with mean {mean}: {e}")))
    };
    let lower = beta(m.lower_mean)?;
    let upper = beta(m.upper_mean)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probs = Vec::with_capacity(n);
    while probs.len() < n {
        let component = if rng.random::<f64>() < m.upper_weight {
            &upper
        } else {
            &lower
        };
        let span = model.segment_len.min(n - probs.len());
        probs.extend((0..span).map(|_| component.sample(&mut rng).clamp(0.0, 1.0)));
    }
    Ok(TokenProbVector { probs })
}

/// Latent parameters of one synthetic run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub family: Family,
    /// Accuracy before the transition (after it, for the inverse family).
    pub floor: f64,
    pub ceiling: f64,
    /// Transition steepness per checkpoint.
    pub rate: f64,
    /// Checkpoint (1-based) at the transition midpoint.
    pub midpoint: f64,
    pub dip_depth: f64,
    pub dip_center: f64,
    pub dip_width: f64,
    pub noise_std: f64,
    pub checkpoints: usize,
    /// Capability runs `lead` transition units ahead of accuracy.
    pub lead: f64,
    pub capability_slope: f64,
}

impl FamilySpec {
    fn validate(&self) -> Result<()> {
        if self.checkpoints < 4 {
            return Err(Error::invalid(format!(
                "need at least 4 checkpoints, got {}",
                self.checkpoints
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid(format!(
                "noise_std {} must be nonnegative",
                self.noise_std
            )));
        }
        let vals = [
            self.floor,
            self.ceiling,
            self.rate,
            self.midpoint,
            self.dip_depth,
            self.dip_center,
        ];
        if vals.iter().any(|v| !v.is_finite())
            || !(self.dip_width > 0.0)
            || !(self.capability_slope > 0.0)
        {
            return Err(Error::invalid(
                "family parameters must be finite with positive dip width and slope",
            ));
        }
        Ok(())
    }

    fn phase(&self, t: f64) -> f64 {
        self.rate * (t - self.midpoint)
    }

    /// Noise-free accuracy at 1-based checkpoint `t`.
    pub fn mean_accuracy(&self, t: f64) -> f64 {
        let s = sigmoid(self.phase(t));
        let y = match self.family {
            Family::Saturating | Family::Plateau => self.floor + (self.ceiling - self.floor) * s,
            Family::Inverse => self.ceiling - (self.ceiling - self.floor) * s,
            Family::UShaped => {
                let dip = self.dip_depth
                    * (-(t - self.dip_center).powi(2) / (2.0 * self.dip_width.powi(2))).exp();
                self.floor + (self.ceiling - self.floor) * s - dip
            }
        };
        y.clamp(0.0, 1.0)
    }

    /// Latent capability at 1-based checkpoint `t`.
    pub fn capability(&self, t: f64) -> f64 {
        sigmoid(self.capability_slope * (self.phase(t) + self.lead))
    }

    pub fn capability_curve(&self) -> Vec<f64> {
        (1..=self.checkpoints)
            .map(|t| self.capability(t as f64))
            .collect()
    }

    /// Sets `lead` so that capability at 1-based checkpoint `t` equals `c`.
    pub fn pin_capability(&mut self, t: f64, c: f64) {
        self.lead = logit(c.clamp(1e-6, 1.0 - 1e-6)) / self.capability_slope - self.phase(t);
    }

    /// Draws run parameters for `family`.
    pub fn sample<R: Rng + ?Sized>(
        family: Family,
        checkpoints: usize,
        noise_std: f64,
        rng: &mut R,
    ) -> Self {
        let t = checkpoints as f64;
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        // Ceiling and floor are correlated, so the observed start of a run
        // says something about where it ends.
        let floor = u(0.2, 0.35);
        let ceiling = floor + 0.3 + 1.2 * (floor - 0.2) + u(-0.03, 0.03);
        let mut spec = FamilySpec {
            family,
            floor,
            ceiling,
            rate: u(0.5, 1.0),
            midpoint: u(0.35 * t, 0.75 * t),
            dip_depth: 0.0,
            dip_center: 0.5 * t,
            dip_width: 1.0,
            noise_std,
            checkpoints,
            lead: u(3.0, 5.0),
            capability_slope: 0.6,
        };
        match family {
            Family::Saturating => {}
            Family::Plateau => {
                spec.midpoint = u(0.1 * t, 0.25 * t);
                spec.rate = u(1.2, 2.0);
            }
            Family::Inverse => {
                spec.ceiling = u(0.55, 0.85);
                spec.floor = spec.ceiling - 0.15 - 0.8 * (spec.ceiling - 0.55) + u(-0.03, 0.03);
            }
            Family::UShaped => {
                spec.dip_depth = u(0.1, 0.2);
                spec.dip_center = u(0.3 * t, 0.6 * t);
                spec.dip_width = u(0.08 * t, 0.16 * t);
            }
        }
        spec
    }
}

/// Accuracy trajectory of one run with iid Gaussian noise.
pub fn gen_trajectory(spec: &FamilySpec, run_id: &str, seed: u64) -> Result<Trajectory> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let accuracies = (1..=spec.checkpoints)
        .map(|t| {
            let y = spec.mean_accuracy(t as f64);
            let eps = if spec.noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (y + eps).clamp(0.0, 1.0)
        })
        .collect();
    Ok(Trajectory {
        run_id: run_id.to_string(),
        task_id: spec.family.name().to_string(),
        compute_unit_flops: 1e18,
        accuracies,
        token_prob_files: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Heldout,
}

impl SplitKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Heldout => "heldout",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub runs: usize,
    /// Families assigned round-robin across runs.
    pub families: Vec<Family>,
    /// Families that appear only in the held-out split.
    pub heldout_only: Vec<Family>,
    pub heldout_fraction: f64,
    pub checkpoints: usize,
    pub tokens: usize,
    pub noise_std: f64,
    pub token_model: TokenModel,
    /// Context fraction used to locate each run's anchor checkpoint.
    pub context_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            runs: 100,
            families: Family::ALL.to_vec(),
            heldout_only: Vec::new(),
            heldout_fraction: 0.2,
            checkpoints: 15,
            tokens: 4096,
            noise_std: 0.01,
            token_model: TokenModel::default(),
            context_fraction: 0.2,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    /// Last observed checkpoint (0-based) under the configured context fraction.
    pub fn anchor_index(&self) -> usize {
        let t = self.checkpoints;
        ((self.context_fraction * t as f64 + 1e-9).floor() as usize).clamp(2, t - 1) - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRun {
    pub run_id: String,
    pub split: SplitKind,
    pub spec: FamilySpec,
    pub seed: u64,
    pub capability: Vec<f64>,
    /// Capability at the anchor checkpoint lies in the token model's flat band.
    pub matched_mean: bool,
}

/// A generated corpus held in memory. Token probabilities are drawn on
/// demand from each run's seed.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub config: CorpusConfig,
    pub runs: Vec<SyntheticRun>,
    pub trajectories: Vec<Trajectory>,
    /// Pairs of run ids with equal mean token probability at the anchor
    /// checkpoint but different mixture shape.
    pub matched_mean_pairs: Vec<(String, String)>,
}

fn run_seed(seed: u64, run: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64 + 1);
    rng.random()
}

fn token_seed(run_seed: u64, checkpoint: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(checkpoint as u64 + 1);
    rng.random()
}

impl SyntheticCorpus {
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        config.token_model.validate()?;
        if config.families.is_empty() {
            return Err(Error::invalid("at least one family is required"));
        }
        if config.tokens == 0 {
            return Err(Error::invalid("token count must be at least 1"));
        }
        if !(0.0..1.0).contains(&config.heldout_fraction) {
            return Err(Error::invalid("heldout fraction must lie in [0, 1)"));
        }
        let mut runs = Vec::with_capacity(config.runs);
        let mut trajectories = Vec::with_capacity(config.runs);
        let anchor = config.anchor_index();
        let pinned = config.token_model.matched_mean_pair();
        for i in 0..config.runs {
            let seed = run_seed(config.seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let family = config.families[i % config.families.len()];
            let mut spec =
                FamilySpec::sample(family, config.checkpoints, config.noise_std, &mut rng);
            // The first two runs always form a matched-mean pair.
            match i {
                0 => spec.pin_capability((anchor + 1) as f64, pinned.0),
                1 => spec.pin_capability((anchor + 1) as f64, pinned.1),
                _ => {}
            }
            let split = if config.heldout_only.contains(&family)
                || rng.random::<f64>() < config.heldout_fraction
            {
                SplitKind::Heldout
            } else {
                SplitKind::Train
            };
            let run_id = format!("run{i:05}");
            let traj = gen_trajectory(&spec, &run_id, rng.random())?;
            let capability = spec.capability_curve();
            runs.push(SyntheticRun {
                run_id,
                split,
                matched_mean: config.token_model.in_flat_band(capability[anchor]),
                spec,
                seed,
                capability,
            });
            trajectories.push(traj);
        }
        let matched_mean_pairs = matched_pairs(&runs, &config.token_model, anchor);
        Ok(Self {
            config: config.clone(),
            runs,
            trajectories,
            matched_mean_pairs,
        })
    }

    pub fn split_indices(&self, split: SplitKind) -> Vec<usize> {
        (0..self.runs.len())
            .filter(|&i| self.runs[i].split == split)
            .collect()
    }

    pub fn run_index(&self, run_id: &str) -> Option<usize> {
        // run ids encode their index
        let i: usize = run_id.strip_prefix("run")?.parse().ok()?;
        (self.runs.get(i)?.run_id == run_id).then_some(i)
    }

    pub fn token_probs_at(&self, run: usize, checkpoint: usize) -> Result<TokenProbVector> {
        let r = &self.runs[run];
        let c = *r.capability.get(checkpoint).ok_or_else(|| {
            Error::Data(format!("run {} has no checkpoint {checkpoint}", r.run_id))
        })?;
        gen_token_probs(
            &self.config.token_model,
            c,
            self.config.tokens,
            token_seed(r.seed, checkpoint),
        )
    }

    /// Writes trajectories, token-probability files and `corpus.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<CorpusIndex> {
        for (run, traj) in self.runs.iter().zip(&self.trajectories) {
            let split_dir = dir.join(run.split.dir_name());
            let i = self.run_index(&run.run_id).expect("run ids are positional");
            let mut names = Vec::with_capacity(traj.len());
            for t in 0..traj.len() {
                let rel = format!("probs/{}/ckpt{t:04}.nnsl", run.run_id);
                files::write_token_probs(&split_dir.join(&rel), &self.token_probs_at(i, t)?)?;
                names.push(rel);
            }
            let mut traj = traj.clone();
            traj.token_prob_files = Some(names);
            files::write_trajectory(
                &split_dir.join(format!("{}{}", run.run_id, files::TRAJECTORY_SUFFIX)),
                &traj,
            )?;
        }
        let index = CorpusIndex {
            config: self.config.clone(),
            runs: self.runs.clone(),
            matched_mean_pairs: self.matched_mean_pairs.clone(),
        };
        let mut json = serde_json::to_string_pretty(&index).expect("corpus index serializes");
        json.push('\n');
        fsutil::atomic_write(&dir.join("corpus.json"), json.as_bytes())?;
        Ok(index)
    }
}

impl LossStore for SyntheticCorpus {
    fn token_probs(&self, traj: &Trajectory, checkpoint: usize) -> Result<TokenProbVector> {
        let run = self.run_index(&traj.run_id).ok_or_else(|| {
            Error::Data(format!(
                "run {} is not in the synthetic corpus",
                traj.run_id
            ))
        })?;
        self.token_probs_at(run, checkpoint)
    }
}

/// Pairs flat-band runs of the same split whose anchor capabilities are far
/// enough apart that their mixture variances differ by at least 0.02.
fn matched_pairs(
    runs: &[SyntheticRun],
    model: &TokenModel,
    anchor: usize,
) -> Vec<(String, String)> {
    let mut slice: Vec<(f64, &SyntheticRun)> = runs
        .iter()
        .filter(|r| r.matched_mean)
        .map(|r| (model.mixture(r.capability[anchor]).variance(), r))
        .collect();
    slice.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut pairs = Vec::new();
    let (mut lo, mut hi) = (0usize, slice.len());
    while lo + 1 < hi {
        let (va, a) = slice[lo];
        let (vb, b) = slice[hi - 1];
        if vb - va < 0.02 {
            break;
        }
        pairs.push((a.run_id.clone(), b.run_id.clone()));
        lo += 1;
        hi -= 1;
    }
    pairs
}

/// Contents of `corpus.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub config: CorpusConfig,
    pub runs: Vec<SyntheticRun>,
    pub matched_mean_pairs: Vec<(String, String)>,
}

impl CorpusIndex {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            detail: e.to_string(),
        })
    }
}

/// Generates a corpus and writes it to `dir`. Returns the index and the
/// directory of each split.
pub fn gen_corpus(config: &CorpusConfig, dir: &Path) -> Result<(CorpusIndex, PathBuf, PathBuf)> {
    let corpus = SyntheticCorpus::generate(config)?;
    let index = corpus.write(dir)?;
    Ok((index, dir.join("train"), dir.join("heldout")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinned_capability_hits_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut spec = FamilySpec::sample(Family::Saturating, 15, 0.0, &mut rng);
        spec.pin_capability(3.0, 0.42);
        assert!((spec.capability(3.0) - 0.42).abs() < 1e-12);
    }

    #[test]
    fn token_model_mean_is_flat_in_band() {
        let m = TokenModel::default();
        for c in [0.1, 0.3, 0.5, 0.7, 0.85] {
            assert!((m.mixture(c).mean() - 0.5).abs() < 1e-12);
        }
        assert!((m.mean(0.0) - 0.3).abs() < 1e-12);
        assert!((m.mean(1.0) - 0.7).abs() < 1e-12);
    }
}
