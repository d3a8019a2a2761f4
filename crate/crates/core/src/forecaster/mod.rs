//! Quantile-regression transformer over accuracy contexts, its ablation
//! variants, and the standalone histogram-change probe.

mod checkpoint;
mod train;

use ndgrad::nn::{self, EncoderLayer};
use ndgrad::{kernels, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{
    truncate_oldest, ContextSequence, Representation, RepresentationKind, Variant,
};
use crate::encoders::{
    average_encode, cnn_encode, histdiff_encode, EncoderConfig, EncoderIds, EncoderKind, Init,
    LinearIds, NormIds,
};
use crate::error::{Error, Result};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CheckpointHeader,
    CHECKPOINT_MAGIC,
};
pub use train::{
    encode_loss_trace, train, train_with, write_loss_trace, RunConfig, TraceRow, TrainAbort,
    TrainConfig, TrainOutcome, TrainSet,
};

pub const QUANTILES: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Positions available to CLS, the encoder token and the context.
    pub max_seq_len: usize,
    pub encoder: EncoderConfig,
    pub quantiles: Vec<f64>,
}

impl ModelConfig {
    pub fn desk(variant: Variant) -> Self {
        Self {
            variant,
            hidden_dim: 64,
            layers: 2,
            heads: 2,
            ffn_dim: 256,
            max_seq_len: 512,
            encoder: EncoderConfig::desk(),
            quantiles: QUANTILES.to_vec(),
        }
    }

    pub fn full(variant: Variant) -> Self {
        Self {
            variant,
            hidden_dim: 512,
            layers: 6,
            heads: 8,
            ffn_dim: 2048,
            max_seq_len: 512,
            encoder: EncoderConfig::full(),
            quantiles: QUANTILES.to_vec(),
        }
    }

    pub fn encoder_kind(&self) -> EncoderKind {
        match self.variant {
            Variant::NeuNeu => EncoderKind::Cnn,
            Variant::Average => EncoderKind::Average,
            Variant::HistDiff | Variant::DiffProbe => EncoderKind::HistDiff,
            Variant::NoLoss => EncoderKind::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.hidden_dim;
        if d == 0 || d % 2 != 0 {
            return Err(Error::invalid(format!(
                "hidden_dim {d} must be even and positive"
            )));
        }
        if self.variant != Variant::DiffProbe {
            if self.heads == 0 || d % self.heads != 0 || (d / self.heads) % 2 != 0 {
                return Err(Error::invalid(format!(
                    "hidden_dim {d} must split into {} heads of even width",
                    self.heads
                )));
            }
            if self.ffn_dim == 0 {
                return Err(Error::invalid("ffn_dim must be positive"));
            }
            if self.max_seq_len < 3 {
                return Err(Error::invalid(
                    "max_seq_len must leave room for at least one context element",
                ));
            }
        }
        if self.quantiles.is_empty()
            || !self.quantiles.iter().all(|&q| q > 0.0 && q < 1.0)
            || !self.quantiles.windows(2).all(|w| w[0] < w[1])
        {
            return Err(Error::invalid(
                "quantiles must be strictly increasing inside (0, 1)",
            ));
        }
        if self.encoder_kind() == EncoderKind::Cnn {
            self.encoder.flatten_dim()?;
        }
        Ok(())
    }

    /// Longest context the transformer accepts.
    pub fn max_context(&self) -> usize {
        let encoder_token = usize::from(self.encoder_kind() != EncoderKind::None);
        self.max_seq_len.saturating_sub(1 + encoder_token)
    }
}

/// Raw head outputs, one per configured quantile.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantilePrediction {
    pub raw: Vec<f64>,
}

impl QuantilePrediction {
    /// Raw outputs sorted ascending (monotone rearrangement).
    pub fn sorted(&self) -> Vec<f64> {
        let mut v = self.raw.clone();
        v.sort_by(f64::total_cmp);
        v
    }

    /// `(median, lo, hi)` read from the sorted outputs and clamped to `[0, 1]`.
    pub fn point_and_interval(&self) -> (f64, f64, f64) {
        let s = self.sorted();
        let c = |v: f64| v.clamp(0.0, 1.0);
        (c(s[s.len() / 2]), c(s[0]), c(s[s.len() - 1]))
    }
}

/// Summed pinball loss of raw (unsorted) quantile outputs against `target`.
pub fn pinball_loss(raw: &[f64], target: f64, taus: &[f64]) -> f64 {
    kernels::pinball(raw, target, taus)
}

#[derive(Clone, Copy, Debug)]
struct LayerIds {
    attn_norm: NormIds,
    query: LinearIds,
    key: LinearIds,
    value: LinearIds,
    output: LinearIds,
    ffn_norm: NormIds,
    ffn_in: LinearIds,
    ffn_out: LinearIds,
}

impl LayerIds {
    fn create(
        store: &mut ParamStore,
        init: &mut Init,
        i: usize,
        d: usize,
        ffn: usize,
    ) -> Result<Self> {
        let p = |s: &str| format!("layer{i}.{s}");
        Ok(Self {
            attn_norm: NormIds::create(store, &p("attn_norm"), d)?,
            query: LinearIds::create(store, init, &p("query"), d, d)?,
            key: LinearIds::create(store, init, &p("key"), d, d)?,
            value: LinearIds::create(store, init, &p("value"), d, d)?,
            output: LinearIds::create(store, init, &p("output"), d, d)?,
            ffn_norm: NormIds::create(store, &p("ffn_norm"), d)?,
            ffn_in: LinearIds::create(store, init, &p("ffn_in"), d, ffn)?,
            ffn_out: LinearIds::create(store, init, &p("ffn_out"), ffn, d)?,
        })
    }

    fn bind(&self, g: &mut Graph<'_>) -> EncoderLayer {
        EncoderLayer {
            attn_norm: self.attn_norm.bind(g),
            query: self.query.bind(g),
            key: self.key.bind(g),
            value: self.value.bind(g),
            output: self.output.bind(g),
            ffn_norm: self.ffn_norm.bind(g),
            ffn_in: self.ffn_in.bind(g),
            ffn_out: self.ffn_out.bind(g),
        }
    }
}

/// Accuracy and gap projections of the context embedding.
#[derive(Clone, Copy, Debug)]
pub struct ContextIds {
    pub accuracy: LinearIds,
    pub gap: LinearIds,
}

#[derive(Clone, Debug)]
struct TransformerIds {
    cls: ParamId,
    context: ContextIds,
    encoder: EncoderIds,
    layers: Vec<LayerIds>,
    final_norm: NormIds,
    head: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeIds {
    pub hidden1: LinearIds,
    pub hidden2: LinearIds,
    pub out: LinearIds,
}

#[derive(Clone, Debug)]
enum ModelIds {
    Transformer(TransformerIds),
    Probe(ProbeIds),
}

/// A model of any variant with its parameters.
#[derive(Clone, Debug)]
pub struct Forecaster {
    config: ModelConfig,
    store: ParamStore,
    ids: ModelIds,
}

/// `[Linear_y(y); Linear_g(ln(1 + g))]` per context row, from `[t, 1]` columns.
pub fn embed_context(g: &mut Graph<'_>, ids: &ContextIds, y: Var, gap: Var) -> Result<Var> {
    let cy = ids.accuracy.bind(g).forward(g, y)?;
    let lg = g.ln1p(gap)?;
    let cg = ids.gap.bind(g).forward(g, lg)?;
    Ok(g.concat_cols(&[cy, cg])?)
}

/// `y_anchor + MLP(Δh)` before clamping, as a `[1]` tensor.
pub fn diffprobe_raw(g: &mut Graph<'_>, ids: &ProbeIds, delta: Var, y_anchor: f64) -> Result<Var> {
    let h = ids.hidden1.bind(g).forward(g, delta)?;
    let h = g.gelu(h);
    let h = ids.hidden2.bind(g).forward(g, h)?;
    let h = g.gelu(h);
    let change = ids.out.bind(g).forward(g, h)?;
    let change = g.reshape(change, &[1])?;
    let anchor = g.constant(Tensor::scalar(y_anchor));
    Ok(g.add(change, anchor)?)
}

fn column(g: &mut Graph<'_>, values: Vec<f64>) -> Var {
    let n = values.len();
    g.constant(Tensor::new(vec![n, 1], values).expect("nonempty column"))
}

impl Forecaster {
    /// A freshly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
        let d = config.hidden_dim;
        let ids = if config.variant == Variant::DiffProbe {
            let bins = config.encoder.bins;
            let hidden1 = LinearIds::create(&mut store, &mut init, "probe.hidden1", bins, d)?;
            let hidden2 = LinearIds::create(&mut store, &mut init, "probe.hidden2", d, d)?;
            let out = LinearIds::create(&mut store, &mut init, "probe.out", d, 1)?;
            // a zero final layer makes the untrained probe predict "no change"
            store.get_mut(out.weight).data_mut().fill(0.0);
            ModelIds::Probe(ProbeIds {
                hidden1,
                hidden2,
                out,
            })
        } else {
            let cls = store.insert("cls", init.trunc_normal(&[d], crate::encoders::INIT_STD))?;
            let context = ContextIds {
                accuracy: LinearIds::create(&mut store, &mut init, "context.accuracy", 1, d / 2)?,
                gap: LinearIds::create(&mut store, &mut init, "context.gap", 1, d / 2)?,
            };
            let encoder = EncoderIds::create(
                config.encoder_kind(),
                &config.encoder,
                d,
                &mut store,
                &mut init,
            )?;
            let layers = (0..config.layers)
                .map(|i| LayerIds::create(&mut store, &mut init, i, d, config.ffn_dim))
                .collect::<Result<Vec<_>>>()?;
            let final_norm = NormIds::create(&mut store, "final_norm", d)?;
            let head = LinearIds::create(&mut store, &mut init, "head", d, config.quantiles.len())?;
            // start from the unconditional quantiles of a uniform target
            store
                .get_mut(head.bias)
                .data_mut()
                .copy_from_slice(&config.quantiles);
            ModelIds::Transformer(TransformerIds {
                cls,
                context,
                encoder,
                layers,
                final_norm,
                head,
            })
        };
        Ok(Self { config, store, ids })
    }

    /// Rebuilds a model from stored tensors. Names, order and shapes must
    /// match what `config` creates.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if tensors.len() != model.store.len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, found {}",
                model.store.len(),
                tensors.len()
            )));
        }
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            let id = ParamId(i);
            let expected = model.store.name(id);
            if expected != name || model.store.get(id).shape() != t.shape() {
                return Err(Error::invalid(format!(
                    "tensor {i} is {name} {:?}, expected {expected} {:?}",
                    t.shape(),
                    model.store.get(id).shape()
                )));
            }
            *model.store.get_mut(id) = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn context_ids(&self) -> Option<&ContextIds> {
        match &self.ids {
            ModelIds::Transformer(t) => Some(&t.context),
            ModelIds::Probe(_) => None,
        }
    }

    pub fn encoder_ids(&self) -> Option<&EncoderIds> {
        match &self.ids {
            ModelIds::Transformer(t) => Some(&t.encoder),
            ModelIds::Probe(_) => None,
        }
    }

    pub fn probe_ids(&self) -> Option<&ProbeIds> {
        match &self.ids {
            ModelIds::Probe(p) => Some(p),
            ModelIds::Transformer(_) => None,
        }
    }

    fn check_representation(&self, rep: &Representation) -> Result<()> {
        let want = self.config.variant.representation();
        if rep.kind() != want {
            return Err(Error::invalid(format!(
                "{} model expects {want:?} input, got {:?}",
                self.config.variant,
                rep.kind()
            )));
        }
        Ok(())
    }

    /// Encoder embedding as a `[1, d]` row, or `None` for the context-only variant.
    fn encode(
        &self,
        g: &mut Graph<'_>,
        encoder: &EncoderIds,
        rep: &Representation,
    ) -> Result<Option<Var>> {
        let d = self.config.hidden_dim;
        let e = match (encoder, rep) {
            (EncoderIds::None, Representation::None) => return Ok(None),
            (EncoderIds::Cnn(ids), Representation::TokenProbs(p)) => {
                if p.is_empty() {
                    return Err(Error::invalid("token probability vector is empty"));
                }
                let (v, _) = p.fit_to(ids.input_len);
                let x = g.constant(Tensor::new(vec![1, ids.input_len], v)?);
                cnn_encode(g, ids, x)?
            }
            (EncoderIds::Average(ids), Representation::AvgProbSequence(v)) => {
                if v.is_empty() {
                    return Err(Error::invalid("average-probability sequence is empty"));
                }
                let x = column(g, v.clone());
                average_encode(g, ids, x)?
            }
            (EncoderIds::HistDiff(ids), Representation::HistDelta(h)) => {
                if h.bin_count() != self.config.encoder.bins {
                    return Err(Error::invalid(format!(
                        "histogram change has {} bins, model expects {}",
                        h.bin_count(),
                        self.config.encoder.bins
                    )));
                }
                let x = g.constant(Tensor::from_vec(h.delta.clone()));
                histdiff_encode(g, ids, x)?
            }
            _ => return Err(Error::invalid("representation does not match the encoder")),
        };
        Ok(Some(g.reshape(e, &[1, d])?))
    }

    /// Builds the forward pass on `g` (which must borrow this model's
    /// parameters, or a same-shaped copy) and returns the raw `[Q]` outputs.
    ///
    /// The context's final gap is the distance to the target.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_>,
        ctx: &ContextSequence,
        rep: &Representation,
    ) -> Result<Var> {
        self.check_representation(rep)?;
        if ctx.is_empty() {
            return Err(Error::invalid("context sequence is empty"));
        }
        match &self.ids {
            ModelIds::Probe(ids) => {
                let Representation::HistDelta(h) = rep else {
                    unreachable!("checked above")
                };
                if h.bin_count() != self.config.encoder.bins {
                    return Err(Error::invalid(format!(
                        "histogram change has {} bins, model expects {}",
                        h.bin_count(),
                        self.config.encoder.bins
                    )));
                }
                let x = g.constant(Tensor::from_vec(h.delta.clone()));
                let anchor = ctx.pairs.last().map(|p| p.0).unwrap_or_default();
                let v = diffprobe_raw(g, ids, x, anchor)?;
                let ones = g.constant(Tensor::full(&[1, self.config.quantiles.len()], 1.0));
                let v = g.reshape(v, &[1, 1])?;
                let spread = g.matmul(v, ones)?;
                Ok(g.reshape(spread, &[self.config.quantiles.len()])?)
            }
            ModelIds::Transformer(ids) => {
                if ctx.len() > self.config.max_context() {
                    return Err(Error::invalid(format!(
                        "context of {} elements exceeds the limit of {}",
                        ctx.len(),
                        self.config.max_context()
                    )));
                }
                let d = self.config.hidden_dim;
                let y = column(g, ctx.pairs.iter().map(|p| p.0).collect());
                let gap = column(g, ctx.pairs.iter().map(|p| f64::from(p.1)).collect());
                let c = embed_context(g, &ids.context, y, gap)?;
                let cls = g.param(ids.cls);
                let cls = g.reshape(cls, &[1, d])?;
                let mut rows = vec![cls];
                rows.extend(self.encode(g, &ids.encoder, rep)?);
                rows.push(c);
                let mut x = g.concat_rows(&rows)?;
                for layer in &ids.layers {
                    let layer = layer.bind(g);
                    x = nn::attention_block(g, x, &layer, self.config.heads, true)?;
                }
                let h0 = g.slice_rows(x, 0, 1)?;
                let h0 = ids.final_norm.bind(g).forward(g, h0)?;
                let q = ids.head.bind(g).forward(g, h0)?;
                Ok(g.reshape(q, &[self.config.quantiles.len()])?)
            }
        }
    }

    /// Quantile prediction for one context whose final gap is the horizon.
    pub fn forward(
        &self,
        ctx: &ContextSequence,
        rep: &Representation,
    ) -> Result<QuantilePrediction> {
        let mut g = Graph::with_params(&self.store);
        let q = self.forward_graph(&mut g, ctx, rep)?;
        Ok(QuantilePrediction {
            raw: g.value(q).to_vec(),
        })
    }

    /// Shortens an over-long context from its oldest end.
    pub fn fit_context(&self, ctx: &ContextSequence) -> Result<ContextSequence> {
        truncate_oldest(ctx, self.config.max_context().max(1))
    }

    /// Independent predictions, one per target gap. `reps` holds either one
    /// representation shared by every horizon or one per horizon.
    pub fn forecast_horizons(
        &self,
        ctx: &ContextSequence,
        gaps: &[u32],
        reps: &[Representation],
    ) -> Result<Vec<QuantilePrediction>> {
        if reps.len() != 1 && reps.len() != gaps.len() {
            return Err(Error::invalid(format!(
                "{} representations for {} horizons",
                reps.len(),
                gaps.len()
            )));
        }
        let ctx = self.fit_context(ctx)?;
        gaps.iter()
            .enumerate()
            .map(|(i, &gap)| {
                if gap == 0 {
                    return Err(Error::invalid("target gaps must be at least 1"));
                }
                let rep = if reps.len() == 1 { &reps[0] } else { &reps[i] };
                self.forward(&ctx.with_target_gap(gap), rep)
            })
            .collect()
    }

    pub fn representation_kind(&self) -> RepresentationKind {
        self.config.variant.representation()
    }
}
