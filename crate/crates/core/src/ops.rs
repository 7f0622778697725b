//! Forward and backward kernels on plain [`Tensor`]s.
//!
//! These are the building blocks recorded by [`crate::graph::Graph`]; they
//! are also usable directly when no gradient is needed. Convolution uses the
//! cross-correlation convention (no kernel flip). Sequence tensors are laid
//! out as `[batch, channels, time]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Padding mode for [`conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Pad so that `T' = ceil(T / stride)`. Padding is split evenly, with the
    /// extra element on the right when the total is odd.
    Same,
    /// Pad both ends with the given number of zeros.
    Explicit(usize),
}

impl Padding {
    /// `(left, right)` padding for an input of length `len`.
    pub fn resolve(self, len: usize, kernel: usize, stride: usize) -> (usize, usize) {
        match self {
            Padding::Explicit(p) => (p, p),
            Padding::Same => {
                let out = len.div_ceil(stride);
                let needed = ((out - 1) * stride + kernel).saturating_sub(len);
                let left = needed / 2;
                (left, needed - left)
            }
        }
    }
}

/// Geometry of a 1-D sliding window over a padded axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvGeometry {
    pub fn output_len(&self, len: usize, kernel: usize) -> Result<usize> {
        let padded = len + self.pad_left + self.pad_right;
        if self.stride == 0 {
            return Err(Error::invalid("stride must be at least 1"));
        }
        if kernel > padded {
            return Err(Error::invalid(format!(
                "kernel width {kernel} exceeds padded input length {padded}"
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    /// Output positions `to` for which `to*stride + k - pad_left` lands inside
    /// `[0, len)`.
    #[inline]
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        let lo = if self.pad_left > k {
            (self.pad_left - k).div_ceil(s)
        } else {
            0
        };
        let top = len + self.pad_left;
        if top <= k {
            return 0..0;
        }
        let hi = ((top - 1 - k) / s + 1).min(out_len);
        lo..hi.max(lo)
    }
}

fn as_batched(input: &Tensor) -> Result<(usize, usize, usize)> {
    match input.shape() {
        [c, t] => Ok((1, *c, *t)),
        [b, c, t] => Ok((*b, *c, *t)),
        s => Err(Error::shape(format!(
            "expected [channels, time] or [batch, channels, time], got {s:?}"
        ))),
    }
}

/// 1-D cross-correlation of `input` (`[C_in, T]` or `[B, C_in, T]`) with
/// `kernel` (`[C_out, C_in, K]`).
pub fn conv1d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let (_, _, t) = as_batched(input)?;
    let (_, _, k) = kernel.dims3()?;
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let (pad_left, pad_right) = padding.resolve(t, k, stride);
    let geom = ConvGeometry {
        stride,
        pad_left,
        pad_right,
    };
    let out = conv1d_forward(input, kernel, geom)?;
    if input.ndim() == 2 {
        let (_, co, to) = out.dims3()?;
        out.reshape(&[co, to])
    } else {
        Ok(out)
    }
}

/// Batched convolution with explicit geometry; always returns `[B, C_out, T']`.
pub fn conv1d_forward(input: &Tensor, kernel: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let (b, cin, t) = as_batched(input)?;
    let (cout, kcin, k) = kernel.dims3()?;
    if kcin != cin {
        return Err(Error::shape(format!(
            "conv1d: input {:?} has {} channels but kernel {:?} expects {}",
            input.shape(),
            cin,
            kernel.shape(),
            kcin
        )));
    }
    let tout = geom.output_len(t, k)?;
    let x = input.data();
    let w = kernel.data();
    let mut out = vec![0.0; b * cout * tout];
    let s = geom.stride;
    for bi in 0..b {
        for co in 0..cout {
            let orow = &mut out[(bi * cout + co) * tout..(bi * cout + co + 1) * tout];
            for ci in 0..cin {
                let xrow = &x[(bi * cin + ci) * t..(bi * cin + ci + 1) * t];
                let wrow = &w[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                for (kk, &wv) in wrow.iter().enumerate() {
                    let range = geom.valid_range(kk, t, tout);
                    if range.is_empty() {
                        continue;
                    }
                    let shift = kk as isize - geom.pad_left as isize;
                    if s == 1 {
                        let start = (range.start as isize + shift) as usize;
                        let src = &xrow[start..start + range.len()];
                        for (o, &xv) in orow[range].iter_mut().zip(src) {
                            *o += wv * xv;
                        }
                    } else {
                        for to in range {
                            let ti = (to * s) as isize + shift;
                            orow[to] += wv * xrow[ti as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, cout, tout], out)
}

/// Gradients of [`conv1d_forward`] with respect to its input and kernel.
pub fn conv1d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    geom: ConvGeometry,
) -> Result<(Tensor, Tensor)> {
    let (b, cin, t) = as_batched(input)?;
    let (cout, _, k) = kernel.dims3()?;
    let (gb, gc, tout) = grad_out.dims3()?;
    if gb != b || gc != cout {
        return Err(Error::shape(format!(
            "conv1d backward: grad {:?} does not match batch {b} / channels {cout}",
            grad_out.shape()
        )));
    }
    let x = input.data();
    let w = kernel.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let s = geom.stride;
    for bi in 0..b {
        for co in 0..cout {
            let grow = &g[(bi * cout + co) * tout..(bi * cout + co + 1) * tout];
            for ci in 0..cin {
                let xoff = (bi * cin + ci) * t;
                let woff = (co * cin + ci) * k;
                for kk in 0..k {
                    let range = geom.valid_range(kk, t, tout);
                    if range.is_empty() {
                        continue;
                    }
                    let shift = kk as isize - geom.pad_left as isize;
                    let wv = w[woff + kk];
                    let mut acc = 0.0;
                    if s == 1 {
                        let start = (range.start as isize + shift) as usize + xoff;
                        let n = range.len();
                        let gsl = &grow[range];
                        let xsl = &x[start..start + n];
                        for (&gv, &xv) in gsl.iter().zip(xsl) {
                            acc += gv * xv;
                        }
                        for (gxv, &gv) in gx[start..start + n].iter_mut().zip(gsl) {
                            *gxv += wv * gv;
                        }
                    } else {
                        for to in range {
                            let ti = xoff + ((to * s) as isize + shift) as usize;
                            acc += grow[to] * x[ti];
                            gx[ti] += wv * grow[to];
                        }
                    }
                    gw[woff + kk] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gw)?,
    ))
}

/// Per-channel batch statistics of a `[B, C, T]` tensor: biased mean and
/// variance over the batch and time axes.
pub fn channel_stats(input: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (b, c, t) = input.dims3()?;
    let x = input.data();
    let m = (b * t) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += x[(bi * c + ch) * t..(bi * c + ch + 1) * t].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0;
        for bi in 0..b {
            for &v in &x[(bi * c + ch) * t..(bi * c + ch + 1) * t] {
                ss += (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = ss / m;
    }
    Ok((mean, var))
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` per channel. Returns the
/// output together with the normalized input and the per-channel inverse
/// standard deviations (needed by the backward pass).
pub fn batchnorm_apply(
    input: &Tensor,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (b, c, t) = input.dims3()?;
    for (name, v) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
        if v.len() != c {
            return Err(Error::shape(format!(
                "batchnorm {name} has length {} but input {:?} has {c} channels",
                v.len(),
                input.shape()
            )));
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let x = input.data();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * t;
            for i in off..off + t {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    let shape = input.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        Tensor::new(shape, xhat)?,
        inv_std,
    ))
}

/// Backward of batch normalization.
///
/// With `batch_stats` the mean and variance are functions of the input
/// (training mode); otherwise they are constants (evaluation mode).
/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward(
    grad_out: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &[f64],
    batch_stats: bool,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (b, c, t) = grad_out.dims3()?;
    let g = grad_out.data();
    let h = xhat.data();
    let m = (b * t) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * t;
            for i in off..off + t {
                dbeta[ch] += g[i];
                dgamma[ch] += g[i] * h[i];
            }
        }
    }
    let mut gx = vec![0.0; g.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * t;
            let scale = gamma[ch] * inv_std[ch];
            if batch_stats {
                let mean_g = dbeta[ch] / m;
                let mean_gh = dgamma[ch] / m;
                for i in off..off + t {
                    gx[i] = scale * (g[i] - mean_g - h[i] * mean_gh);
                }
            } else {
                for i in off..off + t {
                    gx[i] = scale * g[i];
                }
            }
        }
    }
    Ok((Tensor::new(grad_out.shape().to_vec(), gx)?, dgamma, dbeta))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, subtracting the per-slice maximum before
/// exponentiation.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(input.shape(), axis)?;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..n {
                out[idx(j)] /= sum;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Backward of [`softmax`] given its output `y`.
pub fn softmax_backward(y: &Tensor, grad_out: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(y.shape(), axis)?;
    let yv = y.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; yv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let dot: f64 = (0..n).map(|j| g[idx(j)] * yv[idx(j)]).sum();
            for j in 0..n {
                gx[idx(j)] = yv[idx(j)] * (g[idx(j)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), gx)
}

/// Max pooling over the last axis of a `[B, C, T]` tensor with implicit
/// `-inf` padding. Also returns, for every output, the flat input index of
/// the selected element (first maximum on ties).
pub fn maxpool1d(
    input: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, t) = input.dims3()?;
    let geom = ConvGeometry {
        stride,
        pad_left: padding,
        pad_right: padding,
    };
    let tout = geom.output_len(t, kernel)?;
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * tout);
    let mut arg = Vec::with_capacity(b * c * tout);
    for row in 0..b * c {
        let off = row * t;
        for to in 0..tout {
            let start = (to * stride) as isize - padding as isize;
            let mut best = f64::NEG_INFINITY;
            let mut best_i = usize::MAX;
            for kk in 0..kernel as isize {
                let ti = start + kk;
                if ti < 0 || ti >= t as isize {
                    continue;
                }
                let v = x[off + ti as usize];
                if best_i == usize::MAX || v > best {
                    best = v;
                    best_i = off + ti as usize;
                }
            }
            if best_i == usize::MAX {
                return Err(Error::invalid("max-pool window lies entirely in padding"));
            }
            out.push(best);
            arg.push(best_i);
        }
    }
    Ok((Tensor::new(vec![b, c, tout], out)?, arg))
}

pub fn maxpool1d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(gx)
}

/// Average pooling over the last axis of a `[B, C, T]` tensor, no padding.
pub fn avgpool1d(input: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let (b, c, t) = input.dims3()?;
    let geom = ConvGeometry {
        stride,
        pad_left: 0,
        pad_right: 0,
    };
    let tout = geom.output_len(t, kernel)?;
    let x = input.data();
    let inv = 1.0 / kernel as f64;
    let mut out = Vec::with_capacity(b * c * tout);
    for row in 0..b * c {
        let off = row * t;
        for to in 0..tout {
            let s = off + to * stride;
            out.push(x[s..s + kernel].iter().sum::<f64>() * inv);
        }
    }
    Tensor::new(vec![b, c, tout], out)
}

pub fn avgpool1d_backward(
    input_shape: &[usize],
    kernel: usize,
    stride: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (_, _, tout) = grad_out.dims3()?;
    let t = *input_shape.last().unwrap();
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    let inv = 1.0 / kernel as f64;
    for (row, g) in grad_out.data().chunks(tout).enumerate() {
        let off = row * t;
        for (to, &gv) in g.iter().enumerate() {
            let s = off + to * stride;
            for v in &mut d[s..s + kernel] {
                *v += gv * inv;
            }
        }
    }
    Ok(gx)
}

/// Mean over the last axis: `[B, C, T] -> [B, C]`.
pub fn mean_last(input: &Tensor) -> Result<Tensor> {
    let (b, c, t) = input.dims3()?;
    let data = input
        .data()
        .chunks(t)
        .map(|row| row.iter().sum::<f64>() / t as f64)
        .collect();
    Tensor::new(vec![b, c], data)
}

/// `[M, K] x [K, N] -> [M, N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Batched `[B, M, K] x [B, K, N] -> [B, M, N]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, m, k) = a.dims3()?;
    let (bb, k2, n) = b.dims3()?;
    if ba != bb || k != k2 {
        return Err(Error::shape(format!("bmm: {:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0; ba * m * n];
    for i in 0..ba {
        gemm_acc(
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            &mut out[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Tensor::new(vec![ba, m, n], out)
}

/// `out += a * b` for row-major `a: [m, k]`, `b: [k, n]`.
#[inline]
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// Swap the last two axes of a rank-3 tensor.
pub fn transpose_last2(input: &Tensor) -> Result<Tensor> {
    let (b, m, n) = input.dims3()?;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        let off = bi * m * n;
        for i in 0..m {
            for j in 0..n {
                out[off + j * m + i] = x[off + i * n + j];
            }
        }
    }
    Tensor::new(vec![b, n, m], out)
}

/// Concatenate tensors along `axis`; all other dimensions must agree.
pub fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat of an empty list"))?;
    let (outer, _, inner) = axis_split(first.shape(), axis)?;
    let mut total = 0;
    for t in inputs {
        let s = t.shape();
        if s.len() != first.ndim()
            || s[..axis] != first.shape()[..axis]
            || s[axis + 1..] != first.shape()[axis + 1..]
        {
            return Err(Error::shape(format!(
                "concat along axis {axis}: {:?} vs {:?}",
                first.shape(),
                s
            )));
        }
        total += s[axis];
    }
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let block = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

/// Split a gradient of [`concat`] back into the pieces' shapes.
pub fn concat_backward(grad_out: &Tensor, sizes: &[usize], axis: usize) -> Result<Vec<Tensor>> {
    let (outer, total, inner) = axis_split(grad_out.shape(), axis)?;
    let g = grad_out.data();
    let mut pieces: Vec<Vec<f64>> = sizes
        .iter()
        .map(|s| Vec::with_capacity(outer * s * inner))
        .collect();
    for o in 0..outer {
        let mut off = o * total * inner;
        for (piece, &s) in pieces.iter_mut().zip(sizes) {
            piece.extend_from_slice(&g[off..off + s * inner]);
            off += s * inner;
        }
    }
    pieces
        .into_iter()
        .zip(sizes)
        .map(|(data, &s)| {
            let mut shape = grad_out.shape().to_vec();
            shape[axis] = s;
            Tensor::new(shape, data)
        })
        .collect()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
