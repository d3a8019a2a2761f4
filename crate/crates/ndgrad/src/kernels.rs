//! Raw slice kernels behind the graph operations.
//!
//! These operate on row-major buffers and know nothing about the tape. The
//! backward kernels *accumulate* into their output gradients.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Output length of a strided, zero-padded 1D convolution.
///
/// Returns `None` when the padded input is shorter than the kernel.
pub fn conv1d_out_len(l_in: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || l_in + 2 * padding < kernel {
        return None;
    }
    Some((l_in + 2 * padding - kernel) / stride + 1)
}

/// Geometry of one 1D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub l_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub l_out: usize,
}

impl ConvGeom {
    /// Valid kernel tap range `[lo, hi)` for output position `l` and the
    /// matching first input index.
    #[inline]
    fn taps(&self, l: usize) -> (usize, usize, usize) {
        let origin = l * self.stride;
        let lo = self.padding.saturating_sub(origin);
        let hi = self
            .kernel
            .min(self.l_in + self.padding - origin.min(self.l_in + self.padding));
        if hi <= lo {
            return (0, 0, 0);
        }
        (lo, hi, origin + lo - self.padding)
    }
}

pub fn conv1d_forward(x: &[f64], w: &[f64], b: &[f64], geom: &ConvGeom, out: &mut [f64]) {
    let ConvGeom {
        c_in,
        l_in,
        c_out,
        kernel,
        l_out,
        ..
    } = *geom;
    for co in 0..c_out {
        let row = &mut out[co * l_out..(co + 1) * l_out];
        row.fill(b[co]);
        for ci in 0..c_in {
            let wk = &w[(co * c_in + ci) * kernel..(co * c_in + ci + 1) * kernel];
            let xr = &x[ci * l_in..(ci + 1) * l_in];
            for (l, o) in row.iter_mut().enumerate() {
                let (lo, hi, first) = geom.taps(l);
                let n = hi - lo;
                *o += dot(&wk[lo..hi], &xr[first..first + n]);
            }
        }
    }
}

/// Accumulates kernel, bias and (optionally) input gradients.
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    geom: &ConvGeom,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let ConvGeom {
        c_in,
        l_in,
        c_out,
        kernel,
        l_out,
        ..
    } = *geom;
    if let Some(db) = db {
        for co in 0..c_out {
            db[co] += dout[co * l_out..(co + 1) * l_out].iter().sum::<f64>();
        }
    }
    if let Some(dw) = dw {
        for co in 0..c_out {
            let drow = &dout[co * l_out..(co + 1) * l_out];
            for ci in 0..c_in {
                let dwk = &mut dw[(co * c_in + ci) * kernel..(co * c_in + ci + 1) * kernel];
                let xr = &x[ci * l_in..(ci + 1) * l_in];
                for (l, &d) in drow.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let (lo, hi, first) = geom.taps(l);
                    axpy(d, &xr[first..first + hi - lo], &mut dwk[lo..hi]);
                }
            }
        }
    }
    if let Some(dx) = dx {
        for co in 0..c_out {
            let drow = &dout[co * l_out..(co + 1) * l_out];
            for ci in 0..c_in {
                let wk = &w[(co * c_in + ci) * kernel..(co * c_in + ci + 1) * kernel];
                let dxr = &mut dx[ci * l_in..(ci + 1) * l_in];
                for (l, &d) in drow.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let (lo, hi, first) = geom.taps(l);
                    axpy(d, &wk[lo..hi], &mut dxr[first..first + hi - lo]);
                }
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Batched matrix product. `a` is `[batch, m, k]`; `b` is `[batch, k, n]`, or
/// `[batch, n, k]` when `trans_b` is set. Overwrites `out` (`[batch, m, n]`).
pub fn matmul_forward(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    out: &mut [f64],
) {
    out.fill(0.0);
    for bt in 0..batch {
        let a = &a[bt * m * k..(bt + 1) * m * k];
        let b = &b[bt * k * n..(bt + 1) * k * n];
        let out = &mut out[bt * m * n..(bt + 1) * m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            if trans_b {
                for (j, o) in orow.iter_mut().enumerate() {
                    *o = dot(arow, &b[j * k..(j + 1) * k]);
                }
            } else {
                for (p, &aip) in arow.iter().enumerate() {
                    if aip != 0.0 {
                        axpy(aip, &b[p * n..(p + 1) * n], orow);
                    }
                }
            }
        }
    }
}

/// Accumulates gradients of [`matmul_forward`].
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward(
    a: &[f64],
    b: &[f64],
    dout: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    da: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    if let Some(da) = da {
        for bt in 0..batch {
            let b = &b[bt * k * n..(bt + 1) * k * n];
            let dout = &dout[bt * m * n..(bt + 1) * m * n];
            let da = &mut da[bt * m * k..(bt + 1) * m * k];
            for i in 0..m {
                let drow = &dout[i * n..(i + 1) * n];
                let darow = &mut da[i * k..(i + 1) * k];
                if trans_b {
                    // da[i,p] += sum_j dout[i,j] b[j,p]
                    for (j, &d) in drow.iter().enumerate() {
                        if d != 0.0 {
                            axpy(d, &b[j * k..(j + 1) * k], darow);
                        }
                    }
                } else {
                    // da[i,p] += sum_j dout[i,j] b[p,j]
                    for (p, o) in darow.iter_mut().enumerate() {
                        *o += dot(drow, &b[p * n..(p + 1) * n]);
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        for bt in 0..batch {
            let a = &a[bt * m * k..(bt + 1) * m * k];
            let dout = &dout[bt * m * n..(bt + 1) * m * n];
            let db = &mut db[bt * k * n..(bt + 1) * k * n];
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let drow = &dout[i * n..(i + 1) * n];
                if trans_b {
                    // db[j,p] += dout[i,j] a[i,p]
                    for (j, &d) in drow.iter().enumerate() {
                        if d != 0.0 {
                            axpy(d, arow, &mut db[j * k..(j + 1) * k]);
                        }
                    }
                } else {
                    // db[p,j] += a[i,p] dout[i,j]
                    for (p, &aip) in arow.iter().enumerate() {
                        if aip != 0.0 {
                            axpy(aip, drow, &mut db[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
        }
    }
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Normalizes contiguous blocks of `block` values. Writes the normalized
/// values to `xhat` and one inverse standard deviation per block.
pub fn normalize_blocks(x: &[f64], block: usize, eps: f64, xhat: &mut [f64], inv_std: &mut [f64]) {
    for (bi, (xs, hs)) in x.chunks(block).zip(xhat.chunks_mut(block)).enumerate() {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[bi] = is;
        for (h, v) in hs.iter_mut().zip(xs) {
            *h = (v - mean) * is;
        }
    }
}

/// Input gradient of block normalization given `dxhat` (gradient w.r.t. the
/// normalized values). Accumulates into `dx`.
pub fn normalize_blocks_backward(
    xhat: &[f64],
    inv_std: &[f64],
    dxhat: &[f64],
    block: usize,
    dx: &mut [f64],
) {
    for (bi, ((hs, ds), dxs)) in xhat
        .chunks(block)
        .zip(dxhat.chunks(block))
        .zip(dx.chunks_mut(block))
        .enumerate()
    {
        let n = hs.len() as f64;
        let mean_d = ds.iter().sum::<f64>() / n;
        let mean_dh = ds.iter().zip(hs).map(|(d, h)| d * h).sum::<f64>() / n;
        let is = inv_std[bi];
        for ((o, d), h) in dxs.iter_mut().zip(ds).zip(hs) {
            *o += is * (d - mean_d - h * mean_dh);
        }
    }
}

/// Rotation angles for rotary embeddings: `cos`/`sin` tables of shape
/// `[positions.len(), head_dim / 2]` with frequencies `10000^(-2j/head_dim)`.
pub fn rope_tables(positions: &[usize], head_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for j in 0..half {
            let theta = 10000f64.powf(-2.0 * j as f64 / head_dim as f64);
            let angle = p as f64 * theta;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (cos, sin)
}

/// Rotates interleaved pairs `(2j, 2j+1)` of every row; `inverse` applies
/// the transpose rotation (used by the backward pass).
pub fn rope_rotate(
    x: &[f64],
    heads: usize,
    seq: usize,
    head_dim: usize,
    cos: &[f64],
    sin: &[f64],
    inverse: bool,
    out: &mut [f64],
) {
    let half = head_dim / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    for h in 0..heads {
        for t in 0..seq {
            let base = (h * seq + t) * head_dim;
            for j in 0..half {
                let (c, s) = (cos[t * half + j], sign * sin[t * half + j]);
                let x0 = x[base + 2 * j];
                let x1 = x[base + 2 * j + 1];
                out[base + 2 * j] = x0 * c - x1 * s;
                out[base + 2 * j + 1] = x0 * s + x1 * c;
            }
        }
    }
}

/// Pinball loss summed over quantile levels.
pub fn pinball(quantiles: &[f64], target: f64, taus: &[f64]) -> f64 {
    quantiles
        .iter()
        .zip(taus)
        .map(|(&q, &tau)| {
            if target >= q {
                tau * (target - q)
            } else {
                (1.0 - tau) * (q - target)
            }
        })
        .sum()
}

/// Subgradient of [`pinball`] w.r.t. each quantile.
pub fn pinball_grad(quantiles: &[f64], target: f64, taus: &[f64]) -> Vec<f64> {
    quantiles
        .iter()
        .zip(taus)
        .map(|(&q, &tau)| if target >= q { -tau } else { 1.0 - tau })
        .collect()
}
