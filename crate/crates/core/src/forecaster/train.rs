use std::fmt::Write as _;
use std::path::Path;

use ndgrad::optim::{clip_grad_norm, AdamConfig, AdamW};
use ndgrad::schedule::lr_at_step;
use ndgrad::{GradBuffer, Graph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Forecaster, ModelConfig};
use crate::datapipe::{materialize, ExampleDescriptor, LossStore, Trajectory};
use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            learning_rate: 6e-4,
            batch_size: 256,
            epochs: 3,
            warmup_ratio: 0.1,
            weight_decay: 0.033,
            max_grad_norm: 1.0,
        }
    }

    /// Smaller batches so a desk-sized corpus still yields enough updates.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::invalid("warmup_ratio must lie in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0) || !(self.max_grad_norm > 0.0) {
            return Err(Error::invalid(
                "weight_decay must be >= 0 and max_grad_norm > 0",
            ));
        }
        Ok(())
    }
}

/// Model and optimization settings, as stored in config files and checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn desk(variant: crate::datapipe::Variant) -> Self {
        Self {
            model: ModelConfig::desk(variant),
            train: TrainConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Examples to train on, referring into `trajectories`.
#[derive(Clone, Copy, Debug)]
pub struct TrainSet<'a> {
    pub trajectories: &'a [Trajectory],
    pub examples: &'a [ExampleDescriptor],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    /// Mean pinball loss of the batch, before the update.
    pub loss: f64,
}

/// Why training stopped early. The returned model holds the parameters
/// from before the failing step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainAbort {
    pub step: u64,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Forecaster,
    pub trace: Vec<TraceRow>,
    pub abort: Option<TrainAbort>,
}

pub fn train(
    set: TrainSet<'_>,
    store: &dyn LossStore,
    config: &RunConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train_with(set, store, config, seed, |_| {})
}

/// Mini-batch AdamW on the mean pinball loss. Batches are reshuffled every
/// epoch from `seed`; the last partial batch is kept. `on_step` sees every
/// trace row as it is produced.
pub fn train_with(
    set: TrainSet<'_>,
    store: &dyn LossStore,
    config: &RunConfig,
    seed: u64,
    mut on_step: impl FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    if set.examples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let tc = &config.train;
    let mut model = Forecaster::new(config.model.clone(), seed)?;
    let taus = config.model.quantiles.clone();
    let kind = model.representation_kind();
    let bins = config.model.encoder.bins;
    let n = set.examples.len();
    let total = (n.div_ceil(tc.batch_size) * tc.epochs) as u64;
    let mut opt = AdamW::new(
        model.params(),
        AdamConfig {
            weight_decay: tc.weight_decay,
            ..AdamConfig::default()
        },
    );
    let mut grads = GradBuffer::zeros_like(model.params());
    let mut order: Vec<usize> = (0..n).collect();
    // the shuffle stream is separate from the initialization stream
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut trace = Vec::with_capacity(total as usize);
    let mut step = 0u64;
    for _ in 0..tc.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(tc.batch_size) {
            let lr = lr_at_step(step, total, tc.warmup_ratio, tc.learning_rate)?;
            grads.zero();
            let mut loss_sum = 0.0;
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let desc = &set.examples[i];
                let traj = set.trajectories.get(desc.run).ok_or_else(|| {
                    Error::Data(format!("example {i} refers to missing run {}", desc.run))
                })?;
                let ex = materialize(desc, traj, kind, store, bins)?;
                let ctx = model.fit_context(&ex.context)?;
                let mut g = Graph::with_params(model.params());
                let q = model.forward_graph(&mut g, &ctx, &ex.representation)?;
                let loss = g.pinball(q, ex.target_accuracy, &taus)?;
                loss_sum += g.value(loss)[0];
                g.backward(loss)?.accumulate_into(&mut grads, scale);
            }
            let loss = loss_sum * scale;
            if !loss.is_finite() {
                return Ok(abort(model, trace, step, format!("loss is {loss}")));
            }
            if let Some(id) = grads.first_non_finite() {
                let name = model.params().name(id).to_string();
                return Ok(abort(
                    model,
                    trace,
                    step,
                    format!("non-finite gradient in {name}"),
                ));
            }
            clip_grad_norm(&mut grads, tc.max_grad_norm);
            let before = model.params().clone();
            opt.step(model.params_mut(), &grads, lr)?;
            let broken = model
                .params()
                .iter()
                .find(|(_, _, t)| !t.is_finite())
                .map(|(_, name, _)| name.to_string());
            if let Some(name) = broken {
                let detail = format!("update made {name} non-finite");
                *model.params_mut() = before;
                return Ok(abort(model, trace, step, detail));
            }
            let row = TraceRow { step, lr, loss };
            on_step(&row);
            trace.push(row);
            step += 1;
        }
    }
    Ok(TrainOutcome {
        model,
        trace,
        abort: None,
    })
}

fn abort(model: Forecaster, trace: Vec<TraceRow>, step: u64, detail: String) -> TrainOutcome {
    TrainOutcome {
        model,
        trace,
        abort: Some(TrainAbort { step, detail }),
    }
}

pub fn encode_loss_trace(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for r in trace {
        let _ = writeln!(out, "{},{},{}", r.step, r.lr, r.loss);
    }
    out
}

pub fn write_loss_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    fsutil::atomic_write(path, encode_loss_trace(trace).as_bytes())
}
