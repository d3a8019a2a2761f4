//! Composite blocks built from graph operations.

use crate::error::{GradError, Result};
use crate::graph::{Graph, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Weight and bias of an affine map, weight stored `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        g.linear(x, self.weight, self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: Var,
    pub shift: Var,
}

impl Norm {
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gain, self.shift, NORM_EPS)
    }
}

/// Parameters of one pre-norm encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub attn_norm: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ffn_norm: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

/// Bidirectional multi-head self-attention over `[seq, d]`.
///
/// With `rope` set, queries and keys are rotated by their row index.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    x: Var,
    layer: &EncoderLayer,
    heads: usize,
    rope: bool,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (seq, d) = match shape.as_slice() {
        [s, d] => (*s, *d),
        _ => {
            return Err(GradError::InvalidArgument(format!(
                "attention expects [seq, d], got {shape:?}"
            )))
        }
    };
    if heads == 0 || d % heads != 0 {
        return Err(GradError::InvalidArgument(format!(
            "attention width {d} not divisible by {heads} heads"
        )));
    }
    let q = layer.query.forward(g, x)?;
    let k = layer.key.forward(g, x)?;
    let v = layer.value.forward(g, x)?;
    let mut q = g.split_heads(q, heads)?;
    let mut k = g.split_heads(k, heads)?;
    let v = g.split_heads(v, heads)?;
    if rope {
        let positions: Vec<usize> = (0..seq).collect();
        q = g.rope(q, &positions)?;
        k = g.rope(k, &positions)?;
    }
    let scores = g.bmm_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / ((d / heads) as f64).sqrt());
    let weights = g.softmax(scores);
    let mixed = g.bmm(weights, v)?;
    let merged = g.merge_heads(mixed)?;
    layer.output.forward(g, merged)
}

/// `x + MHA(LN(x))` followed by `x + FFN(LN(x))` with a GELU feed-forward.
pub fn attention_block(
    g: &mut Graph<'_>,
    x: Var,
    layer: &EncoderLayer,
    heads: usize,
    rope: bool,
) -> Result<Var> {
    let h = layer.attn_norm.forward(g, x)?;
    let a = multi_head_attention(g, h, layer, heads, rope)?;
    let x = g.add(x, a)?;
    let h = layer.ffn_norm.forward(g, x)?;
    let h = layer.ffn_in.forward(g, h)?;
    let h = g.gelu(h);
    let h = layer.ffn_out.forward(g, h)?;
    g.add(x, h)
}
