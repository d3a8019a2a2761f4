//! Central finite-difference checks of reverse-mode gradients.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of every backward kernel it checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Label of the tensor holding the worst coordinate, and its index.
    pub worst: Option<(String, usize)>,
}

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

impl CheckReport {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            checked: 0,
            worst: None,
        }
    }

    fn record(&mut self, label: &str, index: usize, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = Some((label.to_string(), index));
        }
    }
}

/// Coordinates to probe for a tensor of `numel` values: all of them when
/// `limit` covers the tensor, otherwise an evenly strided subset.
fn probe_indices(numel: usize, limit: usize) -> Vec<usize> {
    if numel <= limit {
        return (0..numel).collect();
    }
    let step = numel as f64 / limit as f64;
    (0..limit)
        .map(|i| ((i as f64 + 0.5) * step) as usize)
        .collect()
}

/// Checks gradients of a scalar function of free leaf tensors.
///
/// `f` receives a fresh graph and one leaf per input and must return a scalar.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, limit: usize, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out)[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = CheckReport::new();
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[ti])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        for i in probe_indices(t.numel(), limit) {
            let orig = t.data()[i];
            work[ti].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            report.record(
                &format!("input{ti}"),
                i,
                analytic[i],
                (up - down) / (2.0 * h),
            );
        }
    }
    Ok(report)
}

/// Checks gradients of a scalar function of every tensor in a parameter store.
pub fn check_params<F>(store: &ParamStore, h: f64, limit: usize, f: F) -> Result<CheckReport>
where
    F: for<'p> Fn(&mut Graph<'p>, &'p ParamStore) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g, store)?;
        let grads = g.backward(out)?;
        let mut per_param: Vec<Option<Vec<f64>>> = vec![None; store.len()];
        for (id, gr) in grads.params() {
            per_param[id.0] = gr.map(<[f64]>::to_vec);
        }
        per_param
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let out = f(&mut g, s)?;
        Ok(g.value(out)[0])
    };

    let mut report = CheckReport::new();
    let mut work = store.clone();
    for (id, name, t) in store.iter() {
        let analytic = grads[id.0].clone().unwrap_or_else(|| vec![0.0; t.numel()]);
        for i in probe_indices(t.numel(), limit) {
            let orig = t.data()[i];
            set(&mut work, id, i, orig + h);
            let up = eval(&work)?;
            set(&mut work, id, i, orig - h);
            let down = eval(&work)?;
            set(&mut work, id, i, orig);
            report.record(name, i, analytic[i], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}

fn set(store: &mut ParamStore, id: ParamId, i: usize, v: f64) {
    store.get_mut(id).data_mut()[i] = v;
}
