use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{shape_err, GradError, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Gelu(Var),
    Ln1p(Var),
    Norm {
        x: Var,
        gain: Var,
        shift: Var,
        /// Values per normalization block.
        block: usize,
        /// Consecutive values sharing one gain/shift entry.
        run: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Rope {
        x: Var,
        heads: usize,
        seq: usize,
        head_dim: usize,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    SplitHeads {
        x: Var,
        heads: usize,
        seq: usize,
        head_dim: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
        seq: usize,
        head_dim: usize,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols {
        parts: Vec<Var>,
        rows: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
        cols: usize,
    },
    MeanRows {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Sum(Var),
    Pinball {
        q: Var,
        target: f64,
        taus: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<'p> {
    data: Cow<'p, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// The tape: nodes in execution order, which is a topological order.
///
/// Parameters are borrowed from a [`ParamStore`] rather than copied.
#[derive(Debug, Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    store: Option<&'p ParamStore>,
    param_vars: HashMap<ParamId, Var>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a node; `None` when the node does not require a gradient
    /// or is not on a path to the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of all parameters used in the graph, in registration order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&[f64]>)> {
        self.params.iter().map(|&(id, v)| (id, self.get(v)))
    }

    /// Adds `scale` times every parameter gradient into `buffer`.
    pub fn accumulate_into(&self, buffer: &mut GradBuffer, scale: f64) {
        for (id, g) in self.params() {
            if let Some(g) = g {
                buffer.add_scaled(id, g, scale);
            }
        }
    }
}

fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [m, n] => (*m, *n),
        _ => (
            shape[..shape.len() - 1].iter().product(),
            shape[shape.len() - 1],
        ),
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose [`Graph::param`] leaves borrow from `store`.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            data: Cow::Owned(data),
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            data: Cow::Owned(t.into_data()),
            shape,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let v = self.constant(t);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Trainable parameter borrowed from the store passed to
    /// [`Graph::with_params`]. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .store
            .expect("Graph::param requires a graph built with Graph::with_params");
        let t = store.get(id);
        self.nodes.push(Node {
            data: Cow::Borrowed(t.data()),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is valid")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    // ----------------------------------------------------------------- ops

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(data, shape, Op::Scale(x, c), &[x])
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = as_matrix(self.shape(x));
        if self.numel(bias) != cols {
            return shape_err(
                "add_bias",
                format!("bias of {} for rows of {cols}", self.numel(bias)),
            );
        }
        let b = self.value(bias);
        let data = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(data, shape, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Matrix product of `[m, k]` and `[k, n]`. A rank-1 `a` is a single row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.shape(a));
        let bs = self.shape(b).to_vec();
        if bs.len() != 2 || bs[0] != k {
            return shape_err("matmul", format!("[{m}, {k}] x {bs:?}"));
        }
        self.matmul_raw(a, b, 1, m, k, bs[1], false, vec![m, bs[1]])
    }

    /// Batched `a @ b` for `[h, m, k]` and `[h, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return shape_err("bmm", format!("{sa:?} x {sb:?}"));
        }
        self.matmul_raw(
            a,
            b,
            sa[0],
            sa[1],
            sa[2],
            sb[2],
            false,
            vec![sa[0], sa[1], sb[2]],
        )
    }

    /// Batched `a @ b^T` for `[h, m, k]` and `[h, n, k]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return shape_err("bmm_nt", format!("{sa:?} x {sb:?}^T"));
        }
        self.matmul_raw(
            a,
            b,
            sa[0],
            sa[1],
            sa[2],
            sb[1],
            true,
            vec![sa[0], sa[1], sb[1]],
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_raw(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let mut out = vec![0.0; batch * m * n];
        kernels::matmul_forward(
            self.value(a),
            self.value(b),
            batch,
            m,
            k,
            n,
            trans_b,
            &mut out,
        );
        Ok(self.push(
            out,
            shape,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            &[a, b],
        ))
    }

    /// `x @ w + b` with `w` stored as `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(data, shape, Op::Gelu(x), &[x])
    }

    /// Elementwise `ln(1 + x)`; inputs must exceed -1.
    pub fn ln1p(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).iter().find(|&&v| !(v > -1.0)) {
            return Err(GradError::InvalidArgument(format!("ln1p of {v}")));
        }
        let data = self.value(x).iter().map(|&v| v.ln_1p()).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(data, shape, Op::Ln1p(x), &[x]))
    }

    /// Normalizes each row of `x` (`[rows, d]` or `[d]`) and applies a
    /// per-feature affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (_, d) = as_matrix(self.shape(x));
        if self.numel(gain) != d || self.numel(shift) != d {
            return shape_err(
                "layer_norm",
                format!("affine size differs from feature size {d}"),
            );
        }
        self.norm_raw(x, gain, shift, d, 1, eps)
    }

    /// Group normalization of `[channels, len]`: channels are split into
    /// `groups` contiguous groups, each normalized over all its values, then
    /// a per-channel affine map is applied.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gain: Var,
        shift: Var,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return shape_err("group_norm", format!("expected [C, L], got {shape:?}"));
        }
        let (c, l) = (shape[0], shape[1]);
        if groups == 0 || c % groups != 0 {
            return Err(GradError::InvalidArgument(format!(
                "group_norm: {c} channels are not divisible into {groups} groups"
            )));
        }
        if self.numel(gain) != c || self.numel(shift) != c {
            return shape_err(
                "group_norm",
                format!("affine size differs from channel count {c}"),
            );
        }
        self.norm_raw(x, gain, shift, (c / groups) * l, l, eps)
    }

    fn norm_raw(
        &mut self,
        x: Var,
        gain: Var,
        shift: Var,
        block: usize,
        run: usize,
        eps: f64,
    ) -> Result<Var> {
        let n = self.numel(x);
        let mut xhat = vec![0.0; n];
        let mut inv_std = vec![0.0; n / block];
        kernels::normalize_blocks(self.value(x), block, eps, &mut xhat, &mut inv_std);
        let (g, s) = (self.value(gain), self.value(shift));
        let width = g.len();
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let c = (i / run) % width;
                g[c] * h + s[c]
            })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            data,
            shape,
            Op::Norm {
                x,
                gain,
                shift,
                block,
                run,
                xhat,
                inv_std,
            },
            &[x, gain, shift],
        ))
    }

    /// Strided, zero-padded 1D convolution of `[C_in, L]` with kernels
    /// `[C_out, C_in, k]` and bias `[C_out]`. A rank-1 input has one channel.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (c_in, l_in) = as_matrix(self.shape(x));
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != c_in {
            return Err(GradError::InvalidArgument(format!(
                "conv1d: kernels {ws:?} do not match {c_in} input channels"
            )));
        }
        let (c_out, kernel) = (ws[0], ws[2]);
        if self.numel(b) != c_out {
            return shape_err(
                "conv1d",
                format!("bias of {} for {c_out} channels", self.numel(b)),
            );
        }
        if stride == 0 {
            return Err(GradError::InvalidArgument(
                "conv1d: stride must be >= 1".into(),
            ));
        }
        let l_out = kernels::conv1d_out_len(l_in, kernel, stride, padding).ok_or_else(|| {
            GradError::InvalidArgument(format!(
                "conv1d: padded length {} shorter than kernel {kernel}",
                l_in + 2 * padding
            ))
        })?;
        let geom = ConvGeom {
            c_in,
            l_in,
            c_out,
            kernel,
            stride,
            padding,
            l_out,
        };
        let mut out = vec![0.0; c_out * l_out];
        kernels::conv1d_forward(self.value(x), self.value(w), self.value(b), &geom, &mut out);
        Ok(self.push(
            out,
            vec![c_out, l_out],
            Op::Conv1d { x, w, b, geom },
            &[x, w, b],
        ))
    }

    /// Rotary position embedding of `[heads, seq, head_dim]`, one position
    /// per sequence row.
    pub fn rope(&mut self, x: Var, positions: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != positions.len() {
            return shape_err(
                "rope",
                format!("{shape:?} with {} positions", positions.len()),
            );
        }
        let (heads, seq, head_dim) = (shape[0], shape[1], shape[2]);
        if head_dim % 2 != 0 {
            return Err(GradError::InvalidArgument(format!(
                "rope: head_dim {head_dim} must be even"
            )));
        }
        let (cos, sin) = kernels::rope_tables(positions, head_dim);
        let mut out = vec![0.0; self.numel(x)];
        kernels::rope_rotate(
            self.value(x),
            heads,
            seq,
            head_dim,
            &cos,
            &sin,
            false,
            &mut out,
        );
        Ok(self.push(
            out,
            shape,
            Op::Rope {
                x,
                heads,
                seq,
                head_dim,
                cos,
                sin,
            },
            &[x],
        ))
    }

    /// `[seq, heads * head_dim]` to `[heads, seq, head_dim]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (seq, d) = as_matrix(self.shape(x));
        if heads == 0 || d % heads != 0 {
            return Err(GradError::InvalidArgument(format!(
                "split_heads: width {d} not divisible by {heads} heads"
            )));
        }
        let hd = d / heads;
        let src = self.value(x);
        let mut out = vec![0.0; seq * d];
        for h in 0..heads {
            for t in 0..seq {
                out[(h * seq + t) * hd..(h * seq + t + 1) * hd]
                    .copy_from_slice(&src[t * d + h * hd..t * d + (h + 1) * hd]);
            }
        }
        Ok(self.push(
            out,
            vec![heads, seq, hd],
            Op::SplitHeads {
                x,
                heads,
                seq,
                head_dim: hd,
            },
            &[x],
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return shape_err("merge_heads", format!("expected rank 3, got {shape:?}"));
        }
        let (heads, seq, hd) = (shape[0], shape[1], shape[2]);
        let d = heads * hd;
        let src = self.value(x);
        let mut out = vec![0.0; seq * d];
        for h in 0..heads {
            for t in 0..seq {
                out[t * d + h * hd..t * d + (h + 1) * hd]
                    .copy_from_slice(&src[(h * seq + t) * hd..(h * seq + t + 1) * hd]);
            }
        }
        Ok(self.push(
            out,
            vec![seq, d],
            Op::MergeHeads {
                x,
                heads,
                seq,
                head_dim: hd,
            },
            &[x],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, cols) = as_matrix(self.shape(x));
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Softmax { x, cols }, &[x])
    }

    /// Stacks row blocks (`[r_i, d]` or `[d]`) into `[sum r_i, d]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(GradError::InvalidArgument("concat_rows: no inputs".into()));
        };
        let (_, d) = as_matrix(self.shape(first));
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = as_matrix(self.shape(p));
            if c != d {
                return shape_err("concat_rows", format!("width {c} vs {d}"));
            }
            rows += r;
            data.extend_from_slice(self.value(p));
        }
        Ok(self.push(data, vec![rows, d], Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Joins `[rows, c_i]` blocks side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(GradError::InvalidArgument("concat_cols: no inputs".into()));
        };
        let (rows, _) = as_matrix(self.shape(first));
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = as_matrix(self.shape(p));
            if r != rows {
                return shape_err("concat_cols", format!("{r} rows vs {rows}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(
            data,
            vec![rows, total],
            Op::ConcatCols {
                parts: parts.to_vec(),
                rows,
            },
            parts,
        ))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = as_matrix(self.shape(x));
        if len == 0 || start + len > rows {
            return shape_err(
                "slice_rows",
                format!("{start}..{} of {rows} rows", start + len),
            );
        }
        let data = self.value(x)[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(
            data,
            vec![len, cols],
            Op::SliceRows { x, start, cols },
            &[x],
        ))
    }

    /// Mean over rows, giving `[1, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = as_matrix(self.shape(x));
        let mut out = vec![0.0; cols];
        for row in self.value(x).chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        self.push(out, vec![1, cols], Op::MeanRows { x, rows, cols }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(x) || shape.contains(&0) {
            return shape_err("reshape", format!("{:?} to {shape:?}", self.shape(x)));
        }
        let data = self.value(x).to_vec();
        Ok(self.push(data, shape.to_vec(), Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![s], vec![1], Op::Sum(x), &[x])
    }

    /// Pinball loss of raw quantile predictions against a scalar target,
    /// summed over the quantile levels `taus`.
    pub fn pinball(&mut self, q: Var, target: f64, taus: &[f64]) -> Result<Var> {
        if self.numel(q) != taus.len() {
            return shape_err(
                "pinball",
                format!("{} outputs for {} levels", self.numel(q), taus.len()),
            );
        }
        let loss = kernels::pinball(self.value(q), target, taus);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::Pinball {
                q,
                target,
                taus: taus.to_vec(),
            },
            &[q],
        ))
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.numel(loss) != 1 {
            return Err(GradError::InvalidArgument(format!(
                "backward needs a scalar seed, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dout) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &dout, &mut grads);
        }
        let mut params: Vec<(ParamId, Var)> =
            self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort_by_key(|&(id, _)| id);
        Ok(Gradients { grads, params })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.numel(v);
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, node: &Node<'_>, dout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.grad_slot(grads, v) {
                        kernels::axpy(1.0, dout, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(g) = self.grad_slot(grads, *a) {
                    for ((o, d), y) in g.iter_mut().zip(dout).zip(vb) {
                        *o += d * y;
                    }
                }
                if let Some(g) = self.grad_slot(grads, *b) {
                    for ((o, d), x) in g.iter_mut().zip(dout).zip(va) {
                        *o += d * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    kernels::axpy(*c, dout, g);
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    kernels::axpy(1.0, dout, g);
                }
                let cols = self.numel(*bias);
                if let Some(g) = self.grad_slot(grads, *bias) {
                    for row in dout.chunks(cols) {
                        kernels::axpy(1.0, row, g);
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = self.nodes[a.0].requires_grad.then(|| vec![0.0; va.len()]);
                let mut db = self.nodes[b.0].requires_grad.then(|| vec![0.0; vb.len()]);
                kernels::matmul_backward(
                    va,
                    vb,
                    dout,
                    *batch,
                    *m,
                    *k,
                    *n,
                    *trans_b,
                    da.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.merge(grads, *a, da);
                self.merge(grads, *b, db);
            }
            Op::Ln1p(x) => {
                let xs = self.value(*x);
                if let Some(g) = self.grad_slot(grads, *x) {
                    for ((o, d), &v) in g.iter_mut().zip(dout).zip(xs) {
                        *o += d / (1.0 + v);
                    }
                }
            }
            Op::Gelu(x) => {
                let xs = self.value(*x);
                if let Some(g) = self.grad_slot(grads, *x) {
                    for ((o, d), &v) in g.iter_mut().zip(dout).zip(xs) {
                        *o += d * kernels::gelu_grad(v);
                    }
                }
            }
            Op::Norm {
                x,
                gain,
                shift,
                block,
                run,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let width = gv.len();
                if let Some(g) = self.grad_slot(grads, *shift) {
                    for (i, d) in dout.iter().enumerate() {
                        g[(i / run) % width] += d;
                    }
                }
                if let Some(g) = self.grad_slot(grads, *gain) {
                    for (i, (d, h)) in dout.iter().zip(xhat).enumerate() {
                        g[(i / run) % width] += d * h;
                    }
                }
                if let Some(g) = self.grad_slot(grads, *x) {
                    let dxhat: Vec<f64> = dout
                        .iter()
                        .enumerate()
                        .map(|(i, d)| d * gv[(i / run) % width])
                        .collect();
                    kernels::normalize_blocks_backward(xhat, inv_std, &dxhat, *block, g);
                }
            }
            Op::Conv1d { x, w, b, geom } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let mut dx = self.nodes[x.0].requires_grad.then(|| vec![0.0; vx.len()]);
                let mut dw = self.nodes[w.0].requires_grad.then(|| vec![0.0; vw.len()]);
                let mut db = self.nodes[b.0].requires_grad.then(|| vec![0.0; geom.c_out]);
                kernels::conv1d_backward(
                    vx,
                    vw,
                    dout,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.merge(grads, *x, dx);
                self.merge(grads, *w, dw);
                self.merge(grads, *b, db);
            }
            Op::Rope {
                x,
                heads,
                seq,
                head_dim,
                cos,
                sin,
            } => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    let mut back = vec![0.0; dout.len()];
                    kernels::rope_rotate(dout, *heads, *seq, *head_dim, cos, sin, true, &mut back);
                    kernels::axpy(1.0, &back, g);
                }
            }
            Op::SplitHeads {
                x,
                heads,
                seq,
                head_dim,
            } => {
                let d = heads * head_dim;
                if let Some(g) = self.grad_slot(grads, *x) {
                    for h in 0..*heads {
                        for t in 0..*seq {
                            kernels::axpy(
                                1.0,
                                &dout[(h * seq + t) * head_dim..(h * seq + t + 1) * head_dim],
                                &mut g[t * d + h * head_dim..t * d + (h + 1) * head_dim],
                            );
                        }
                    }
                }
            }
            Op::MergeHeads {
                x,
                heads,
                seq,
                head_dim,
            } => {
                let d = heads * head_dim;
                if let Some(g) = self.grad_slot(grads, *x) {
                    for h in 0..*heads {
                        for t in 0..*seq {
                            kernels::axpy(
                                1.0,
                                &dout[t * d + h * head_dim..t * d + (h + 1) * head_dim],
                                &mut g[(h * seq + t) * head_dim..(h * seq + t + 1) * head_dim],
                            );
                        }
                    }
                }
            }
            Op::Softmax { x, cols } => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    for ((gr, dr), yr) in g
                        .chunks_mut(*cols)
                        .zip(dout.chunks(*cols))
                        .zip(node.data.chunks(*cols))
                    {
                        let inner = kernels::dot(dr, yr);
                        for ((o, d), y) in gr.iter_mut().zip(dr).zip(yr) {
                            *o += y * (d - inner);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.numel(p);
                    if let Some(g) = self.grad_slot(grads, p) {
                        kernels::axpy(1.0, &dout[offset..offset + n], g);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total = node.shape[1];
                let mut col = 0;
                for &p in parts {
                    let c = self.numel(p) / rows;
                    if let Some(g) = self.grad_slot(grads, p) {
                        for r in 0..*rows {
                            kernels::axpy(
                                1.0,
                                &dout[r * total + col..r * total + col + c],
                                &mut g[r * c..(r + 1) * c],
                            );
                        }
                    }
                    col += c;
                }
            }
            Op::SliceRows { x, start, cols } => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    kernels::axpy(1.0, dout, &mut g[start * cols..start * cols + dout.len()]);
                }
            }
            Op::MeanRows { x, rows, cols } => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    let s = 1.0 / *rows as f64;
                    for row in g.chunks_mut(*cols) {
                        kernels::axpy(s, dout, row);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    kernels::axpy(1.0, dout, g);
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    for o in g.iter_mut() {
                        *o += dout[0];
                    }
                }
            }
            Op::Pinball { q, target, taus } => {
                let sub = kernels::pinball_grad(self.value(*q), *target, taus);
                if let Some(g) = self.grad_slot(grads, *q) {
                    kernels::axpy(dout[0], &sub, g);
                }
            }
        }
    }

    fn merge(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Option<Vec<f64>>) {
        let Some(c) = contribution else { return };
        match &mut grads[v.0] {
            Some(g) => kernels::axpy(1.0, &c, g),
            slot @ None => *slot = Some(c),
        }
    }
}
