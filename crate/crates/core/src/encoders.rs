//! Validation-loss encoders. Each maps its representation to one `d`-vector.

use ndgrad::kernels::conv1d_out_len;
use ndgrad::nn::{Linear, Norm, NORM_EPS};
use ndgrad::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Draws initial parameter values.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    /// Normal(0, std) truncated to two standard deviations.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("positive shape")
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }
}

fn add(store: &mut ParamStore, name: String, t: Tensor) -> Result<ParamId> {
    Ok(store.insert(name, t)?)
}

/// Parameter ids of an affine map with weight `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearIds {
    pub fn create(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: add(
                store,
                format!("{prefix}.weight"),
                init.trunc_normal(&[fan_in, fan_out], INIT_STD),
            )?,
            bias: add(store, format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))?,
        })
    }

    pub fn bind(&self, g: &mut Graph<'_>) -> Linear {
        Linear {
            weight: g.param(self.weight),
            bias: g.param(self.bias),
        }
    }
}

/// Gain and shift of a normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl NormIds {
    pub fn create(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: add(store, format!("{prefix}.gain"), Tensor::full(&[width], 1.0))?,
            shift: add(store, format!("{prefix}.shift"), Tensor::zeros(&[width]))?,
        })
    }

    pub fn bind(&self, g: &mut Graph<'_>) -> Norm {
        Norm {
            gain: g.param(self.gain),
            shift: g.param(self.shift),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Cnn,
    Average,
    HistDiff,
    None,
}

/// Encoder geometry. Only the fields relevant to the active kind are used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Token count `N` the convolutional encoder expects.
    pub input_len: usize,
    /// Histogram bins `B`.
    pub bins: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            input_len: 4096,
            bins: crate::datapipe::DEFAULT_BINS,
            channels: vec![8, 16, 32, 64],
            kernel: 64,
            stride: 16,
            padding: 32,
        }
    }

    pub fn full() -> Self {
        Self {
            input_len: 256_000,
            ..Self::desk()
        }
    }

    /// Sequence length after each convolution.
    pub fn conv_lengths(&self) -> Result<Vec<usize>> {
        if self.input_len == 0 {
            return Err(Error::invalid("encoder input length must be positive"));
        }
        let mut l = self.input_len;
        let mut out = Vec::with_capacity(self.channels.len());
        for _ in &self.channels {
            l = conv1d_out_len(l, self.kernel, self.stride, self.padding).ok_or_else(|| {
                Error::invalid(format!(
                    "length {l} too short for kernel {} with padding {}",
                    self.kernel, self.padding
                ))
            })?;
            out.push(l);
        }
        Ok(out)
    }

    /// Width of the flattened convolution output fed to the projection.
    pub fn flatten_dim(&self) -> Result<usize> {
        let last = *self
            .conv_lengths()?
            .last()
            .ok_or_else(|| Error::invalid("no conv layers"))?;
        Ok(last * self.channels.last().copied().unwrap_or(0))
    }
}

/// `min(8, channels)` groups.
pub fn group_count(channels: usize) -> usize {
    channels.min(8)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvIds {
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: NormIds,
    pub groups: usize,
}

#[derive(Clone, Debug)]
pub struct CnnIds {
    pub convs: Vec<ConvIds>,
    pub proj: LinearIds,
    pub stride: usize,
    pub padding: usize,
    pub input_len: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct HistDiffIds {
    pub hidden: LinearIds,
    pub out: LinearIds,
    pub norm: NormIds,
}

/// Parameters of whichever encoder the model uses.
#[derive(Clone, Debug)]
pub enum EncoderIds {
    Cnn(CnnIds),
    Average(LinearIds),
    HistDiff(HistDiffIds),
    None,
}

impl EncoderIds {
    pub fn create(
        kind: EncoderKind,
        cfg: &EncoderConfig,
        d: usize,
        store: &mut ParamStore,
        init: &mut Init,
    ) -> Result<Self> {
        Ok(match kind {
            EncoderKind::Cnn => {
                cfg.conv_lengths()?;
                let mut convs = Vec::with_capacity(cfg.channels.len());
                let mut c_in = 1;
                for (i, &c_out) in cfg.channels.iter().enumerate() {
                    if c_out == 0 {
                        return Err(Error::invalid("conv channel counts must be positive"));
                    }
                    let prefix = format!("encoder.conv{i}");
                    convs.push(ConvIds {
                        weight: add(
                            store,
                            format!("{prefix}.weight"),
                            init.trunc_normal(&[c_out, c_in, cfg.kernel], INIT_STD),
                        )?,
                        bias: add(store, format!("{prefix}.bias"), Tensor::zeros(&[c_out]))?,
                        norm: NormIds::create(store, &format!("encoder.gn{i}"), c_out)?,
                        groups: group_count(c_out),
                    });
                    c_in = c_out;
                }
                let proj = LinearIds::create(store, init, "encoder.proj", cfg.flatten_dim()?, d)?;
                EncoderIds::Cnn(CnnIds {
                    convs,
                    proj,
                    stride: cfg.stride,
                    padding: cfg.padding,
                    input_len: cfg.input_len,
                })
            }
            EncoderKind::Average => {
                EncoderIds::Average(LinearIds::create(store, init, "encoder.avg", 1, d)?)
            }
            EncoderKind::HistDiff => {
                if cfg.bins < 2 {
                    return Err(Error::invalid("histogram encoder needs at least 2 bins"));
                }
                EncoderIds::HistDiff(HistDiffIds {
                    hidden: LinearIds::create(store, init, "encoder.hist.hidden", cfg.bins, d)?,
                    out: LinearIds::create(store, init, "encoder.hist.out", d, d)?,
                    norm: NormIds::create(store, "encoder.hist.norm", d)?,
                })
            }
            EncoderKind::None => EncoderIds::None,
        })
    }
}

/// Conv → GroupNorm → GELU stack over `x` (`[1, N]`), flattened and projected to `[d]`.
pub fn cnn_encode(g: &mut Graph<'_>, ids: &CnnIds, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.iter().product::<usize>() == 0 || shape.last() != Some(&ids.input_len) {
        return Err(Error::invalid(format!(
            "cnn encoder expects {} tokens, got shape {shape:?}",
            ids.input_len
        )));
    }
    let mut h = g.reshape(x, &[1, ids.input_len])?;
    for conv in &ids.convs {
        let w = g.param(conv.weight);
        let b = g.param(conv.bias);
        h = g.conv1d(h, w, b, ids.stride, ids.padding)?;
        let norm = conv.norm.bind(g);
        h = g.group_norm(h, conv.groups, norm.gain, norm.shift, NORM_EPS)?;
        h = g.gelu(h);
    }
    let flat = flatten(g, h)?;
    let e = ids.proj.bind(g).forward(g, flat)?;
    flatten(g, e)
}

/// Mean over the sequence `values` (`[t, 1]`) of a scalar-to-`d` affine map.
pub fn average_encode(g: &mut Graph<'_>, ids: &LinearIds, values: Var) -> Result<Var> {
    let shape = g.shape(values).to_vec();
    if shape.len() != 2 || shape[1] != 1 {
        return Err(Error::invalid(format!(
            "average encoder expects [t, 1], got {shape:?}"
        )));
    }
    let h = ids.bind(g).forward(g, values)?;
    let m = g.mean_rows(h);
    flatten(g, m)
}

/// `LayerNorm(Linear(GELU(Linear(Δh))))` over a `[B]` histogram change.
pub fn histdiff_encode(g: &mut Graph<'_>, ids: &HistDiffIds, delta: Var) -> Result<Var> {
    let h = ids.hidden.bind(g).forward(g, delta)?;
    let h = g.gelu(h);
    let h = ids.out.bind(g).forward(g, h)?;
    let e = ids.norm.bind(g).forward(g, h)?;
    flatten(g, e)
}

fn flatten(g: &mut Graph<'_>, v: Var) -> Result<Var> {
    let n = g.shape(v).iter().product();
    Ok(g.reshape(v, &[n])?)
}
