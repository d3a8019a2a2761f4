//! Logistic map from mean validation loss to downstream accuracy, fitted by
//! multi-start Levenberg–Marquardt.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::sigmoid;

/// Fitted predictions over the data range must stay inside this band.
pub const SANITY_BOUND: (f64, f64) = (-0.05, 1.05);
pub const MAX_ITERATIONS: usize = 200;
pub const GRAD_TOL: f64 = 1e-8;
const MIN_PAIRS: usize = 5;

/// `f(ℓ) = a / (1 + exp(-k (ℓ - L0))) + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub a: f64,
    pub k: f64,
    #[serde(rename = "L0")]
    pub l0: f64,
    pub b: f64,
}

impl LogisticParams {
    fn to_array(self) -> [f64; 4] {
        [self.a, self.k, self.l0, self.b]
    }

    fn from_array(v: [f64; 4]) -> Self {
        Self {
            a: v[0],
            k: v[1],
            l0: v[2],
            b: v[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub fn logistic_predict(p: &LogisticParams, mean_loss: f64) -> f64 {
    p.a * sigmoid(p.k * (mean_loss - p.l0)) + p.b
}

/// Partial derivatives of the prediction with respect to `(a, k, L0, b)`.
pub fn logistic_jacobian(p: &LogisticParams, mean_loss: f64) -> [f64; 4] {
    let s = sigmoid(p.k * (mean_loss - p.l0));
    let ds = p.a * s * (1.0 - s);
    [s, ds * (mean_loss - p.l0), -ds * p.k, 1.0]
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    /// Chance accuracy of the task, added to the grid of offsets.
    pub chance: Option<f64>,
    /// Random starts drawn from `seed` in addition to the grid.
    pub random_starts: usize,
    pub max_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            chance: None,
            random_starts: 8,
            max_iterations: MAX_ITERATIONS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticFit {
    pub params: LogisticParams,
    pub sse: f64,
    pub n_points: usize,
    pub iterations: usize,
    /// Whether the gradient tolerance was reached before the iteration cap.
    pub converged: bool,
    /// Whether predictions over the data range respect [`SANITY_BOUND`].
    pub within_bound: bool,
}

/// Serialized form of one task's fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFit {
    pub task_id: String,
    pub a: f64,
    pub k: f64,
    #[serde(rename = "L0")]
    pub l0: f64,
    pub b: f64,
    pub sse: f64,
    pub n_points: usize,
}

impl TaskFit {
    pub fn new(task_id: impl Into<String>, fit: &LogisticFit) -> Self {
        let p = fit.params;
        Self {
            task_id: task_id.into(),
            a: p.a,
            k: p.k,
            l0: p.l0,
            b: p.b,
            sse: fit.sse,
            n_points: fit.n_points,
        }
    }

    pub fn params(&self) -> LogisticParams {
        LogisticParams {
            a: self.a,
            k: self.k,
            l0: self.l0,
            b: self.b,
        }
    }
}

pub fn sse(p: &LogisticParams, pairs: &[(f64, f64)]) -> f64 {
    pairs
        .iter()
        .map(|&(l, y)| (y - logistic_predict(p, l)).powi(2))
        .sum()
}

/// `Jᵀ J` and `Jᵀ r` for residuals `r = y - f(ℓ)`.
fn normal_equations(p: &LogisticParams, pairs: &[(f64, f64)]) -> ([[f64; 4]; 4], [f64; 4]) {
    let mut jtj = [[0.0; 4]; 4];
    let mut jtr = [0.0; 4];
    for &(l, y) in pairs {
        let j = logistic_jacobian(p, l);
        let r = y - logistic_predict(p, l);
        for i in 0..4 {
            jtr[i] += j[i] * r;
            for k in 0..4 {
                jtj[i][k] += j[i] * j[k];
            }
        }
    }
    (jtj, jtr)
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve4(mut m: [[f64; 4]; 4], mut v: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if !(m[pivot][col].abs() > 1e-300) {
            return None;
        }
        m.swap(col, pivot);
        v.swap(col, pivot);
        for row in col + 1..4 {
            let f = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= f * m[col][k];
            }
            v[row] -= f * v[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let tail: f64 = (row + 1..4).map(|k| m[row][k] * x[k]).sum();
        x[row] = (v[row] - tail) / m[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

struct Descent {
    params: LogisticParams,
    sse: f64,
    iterations: usize,
    converged: bool,
}

/// Marquardt-damped Gauss–Newton from `start`. Steps that would raise the
/// SSE are rejected and the damping raised instead.
fn descend(start: LogisticParams, pairs: &[(f64, f64)], max_iterations: usize) -> Option<Descent> {
    let mut p = start;
    let mut cost = sse(&p, pairs);
    if !cost.is_finite() {
        return None;
    }
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iterations {
        let (jtj, jtr) = normal_equations(&p, pairs);
        let grad_norm = jtr.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm <= GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let mut accepted = false;
        while lambda <= 1e16 {
            let mut damped = jtj;
            for (i, row) in damped.iter_mut().enumerate() {
                row[i] += lambda * jtj[i][i].max(1e-12);
            }
            if let Some(step) = solve4(damped, jtr) {
                let mut next = p.to_array();
                for (x, s) in next.iter_mut().zip(step) {
                    *x += s;
                }
                let next = LogisticParams::from_array(next);
                let next_cost = sse(&next, pairs);
                if next.is_finite() && next_cost.is_finite() && next_cost <= cost {
                    let stalled = next_cost == cost;
                    p = next;
                    cost = next_cost;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = !stalled;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no step lowers the SSE at machine precision
            break;
        }
    }
    Some(Descent {
        params: p,
        sse: cost,
        iterations,
        converged,
    })
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn within_bound(p: &LogisticParams, lo: f64, hi: f64) -> bool {
    // the prediction is monotone in ℓ, so the extremes sit at the range ends
    [lo, hi].iter().all(|&l| {
        let v = logistic_predict(p, l);
        v >= SANITY_BOUND.0 && v <= SANITY_BOUND.1
    })
}

pub fn fit_logistic(pairs: &[(f64, f64)], seed: u64) -> Result<LogisticFit> {
    fit_logistic_with(pairs, &FitOptions::default(), seed)
}

/// Lowest-SSE fit over a fixed grid of starts plus seeded random starts.
/// Fits whose predictions leave [`SANITY_BOUND`] over the data range are
/// used only when no start stays inside it. The result does not depend on
/// the order of `pairs`.
pub fn fit_logistic_with(
    pairs: &[(f64, f64)],
    opts: &FitOptions,
    seed: u64,
) -> Result<LogisticFit> {
    if pairs.len() < MIN_PAIRS {
        return Err(Error::invalid(format!(
            "logistic fit needs at least {MIN_PAIRS} points, got {}",
            pairs.len()
        )));
    }
    if pairs.iter().any(|(l, y)| !l.is_finite() || !y.is_finite()) {
        return Err(Error::invalid("logistic fit inputs must be finite"));
    }
    let mut data = pairs.to_vec();
    data.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let losses: Vec<f64> = data.iter().map(|p| p.0).collect();
    let (lo, hi) = (losses[0], losses[losses.len() - 1]);

    let mut offsets = vec![0.0];
    offsets.extend(opts.chance);
    let mut starts = Vec::new();
    for a in [0.25, 0.5, 0.75, 1.0] {
        for k in [-8.0, -2.0, -0.5, 0.5, 2.0, 8.0] {
            for q in [0.25, 0.5, 0.75] {
                for &b in &offsets {
                    starts.push(LogisticParams {
                        a,
                        k,
                        l0: quantile(&losses, q),
                        b,
                    });
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = (hi - lo).max(1e-6);
    for _ in 0..opts.random_starts {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        starts.push(LogisticParams {
            a: rng.random_range(-1.0..1.0),
            k: sign * 10f64.powf(rng.random_range(-1.0..1.5)) / span,
            l0: rng.random_range(lo..=hi),
            b: rng.random_range(0.0..0.5),
        });
    }

    let mut best: Option<LogisticFit> = None;
    for start in starts {
        let Some(d) = descend(start, &data, opts.max_iterations) else {
            continue;
        };
        let fit = LogisticFit {
            params: d.params,
            sse: d.sse,
            n_points: data.len(),
            iterations: d.iterations,
            converged: d.converged,
            within_bound: within_bound(&d.params, lo, hi),
        };
        let better = match &best {
            None => true,
            Some(b) => (fit.within_bound, -fit.sse) > (b.within_bound, -b.sse),
        };
        if better {
            best = Some(fit);
        }
    }
    best.ok_or_else(|| Error::Fit {
        best_sse: f64::INFINITY,
        detail: "every start diverged".into(),
    })
}

/// Predictions from ground-truth future mean losses, clamped to `[0, 1]`.
pub fn evaluate_logistic(
    params: &LogisticParams,
    oracle_mean_losses: &[f64],
    heldout: usize,
) -> Result<Vec<f64>> {
    if oracle_mean_losses.len() != heldout {
        return Err(Error::invalid(format!(
            "{} oracle mean losses for {heldout} heldout checkpoints",
            oracle_mean_losses.len()
        )));
    }
    Ok(oracle_mean_losses
        .iter()
        .map(|&l| logistic_predict(params, l).clamp(0.0, 1.0))
        .collect())
}
