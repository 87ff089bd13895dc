//! Forward and backward rules for every primitive the tape records.
//!
//! Binary elementwise primitives accept equal shapes, a scalar on either side,
//! or an operand whose shape is a trailing suffix of the other's (a bias row
//! added to every row of a matrix, for example). Nothing else broadcasts.

use super::tensor::Tensor;
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[m, k] x [k, n] -> [m, n]`.
    Matmul,
    Add,
    Sub,
    Mul,
    Div,
    Minimum,
    Maximum,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Reshape { shape: Vec<usize> },
    /// 2-D transpose.
    Transpose,
    Relu,
    Gelu,
    Sigmoid,
    Softmax,
    LogSoftmax,
    /// Normalizes the final axis to zero mean and unit variance, no affine.
    LayerNorm { eps: f64 },
    Log,
    Exp,
    Abs,
    /// `None` reduces everything to a scalar.
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Scale(f64),
    /// Selects rows along axis 0.
    GatherRows { indices: Vec<usize> },
    /// Unfolds `[h*w, c]` cell features into `[ho*wo, k*k*c]` patches
    /// (zero padding), so a convolution becomes one matmul.
    Im2Col { height: usize, width: usize, kernel: usize, stride: usize, pad: usize },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Minimum => "minimum",
            Primitive::Maximum => "maximum",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Transpose => "transpose",
            Primitive::Relu => "relu",
            Primitive::Gelu => "gelu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Abs => "abs",
            Primitive::Sum { .. } => "sum",
            Primitive::Mean { .. } => "mean",
            Primitive::Scale(_) => "scale",
            Primitive::GatherRows { .. } => "gather_rows",
            Primitive::Im2Col { .. } => "im2col",
        }
    }

    pub fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Matmul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::Minimum
            | Primitive::Maximum => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

fn mismatch(op: &Primitive, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch { op: op.name(), left: a.shape().to_vec(), right: b.shape().to_vec() }
}

fn unary_err(op: &Primitive, a: &Tensor, detail: &[usize]) -> Error {
    Error::ShapeMismatch { op: op.name(), left: a.shape().to_vec(), right: detail.to_vec() }
}

/// Output shape of a broadcasting binary op, or `None` when incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        Some(a.to_vec())
    } else if nb == 1 && b.len() <= a.len() {
        Some(a.to_vec())
    } else if na == 1 && a.len() <= b.len() {
        Some(b.to_vec())
    } else if b.len() < a.len() && a.ends_with(b) {
        Some(a.to_vec())
    } else if a.len() < b.len() && b.ends_with(a) {
        Some(b.to_vec())
    } else {
        None
    }
}

fn binary_forward(
    op: &Primitive,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| mismatch(op, a, b))?;
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let (la, lb) = (ad.len(), bd.len());
    let data = if la == n && lb == n {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        (0..n).map(|i| f(ad[i % la], bd[i % lb])).collect()
    };
    Tensor::new(shape, data)
}

/// Sums a full-size gradient down to an operand's (suffix-broadcast) size.
fn reduce_to(grad: Vec<f64>, target: &Tensor) -> Tensor {
    let n = target.numel();
    if grad.len() == n {
        return Tensor::new(target.shape().to_vec(), grad).expect("same length");
    }
    let mut out = vec![0.0; n];
    for (i, g) in grad.into_iter().enumerate() {
        out[i % n] += g;
    }
    Tensor::new(target.shape().to_vec(), out).expect("target length")
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T b` for `a: [k, m]`, `b: [k, n]`.
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T` for `a: [m, k]`, `b: [n, k]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    out
}

fn reduce_axis(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    let d = x.data();
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            for i in 0..inner {
                out[o * inner + i] += d[base + i];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out).expect("reduced shape")
}

fn expand_axis(g: &Tensor, shape: &[usize], axis: usize, factor: f64) -> Tensor {
    let (outer, len, inner) = axis_split(shape, axis);
    let gd = g.data();
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            for i in 0..inner {
                out[base + i] = gd[o * inner + i] * factor;
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("expanded shape")
}

fn im2col_dims(height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> (usize, usize) {
    let ho = (height + 2 * pad - kernel) / stride + 1;
    let wo = (width + 2 * pad - kernel) / stride + 1;
    (ho, wo)
}

/// Evaluates a primitive. Pure: identical operands give bit-identical output.
pub fn forward(op: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(Error::ShapeMismatch { op: op.name(), left: vec![inputs.len()], right: vec![n] });
        }
    }
    match op {
        Primitive::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch(op, a, b));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
        }
        Primitive::Add => binary_forward(op, inputs[0], inputs[1], |x, y| x + y),
        Primitive::Sub => binary_forward(op, inputs[0], inputs[1], |x, y| x - y),
        Primitive::Mul => binary_forward(op, inputs[0], inputs[1], |x, y| x * y),
        Primitive::Div => binary_forward(op, inputs[0], inputs[1], |x, y| x / y),
        Primitive::Minimum => binary_forward(op, inputs[0], inputs[1], f64::min),
        Primitive::Maximum => binary_forward(op, inputs[0], inputs[1], f64::max),
        Primitive::Concat { axis } => {
            let first = inputs.first().ok_or(Error::ShapeMismatch {
                op: "concat",
                left: vec![],
                right: vec![],
            })?;
            let axis = *axis;
            if axis >= first.ndim() {
                return Err(unary_err(op, first, &[axis]));
            }
            let mut total = 0;
            for t in inputs {
                let same_rank = t.ndim() == first.ndim();
                let same_other = same_rank
                    && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (x, y))| i == axis || x == y);
                if !same_other {
                    return Err(mismatch(op, first, t));
                }
                total += t.shape()[axis];
            }
            let (outer, _, inner) = axis_split(first.shape(), axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[axis] = total;
            Tensor::new(shape, data)
        }
        Primitive::Slice { axis, start, end } => {
            let x = inputs[0];
            if *axis >= x.ndim() || start >= end || *end > x.shape()[*axis] {
                return Err(unary_err(op, x, &[*axis, *start, *end]));
            }
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let width = (end - start) * inner;
            let mut data = Vec::with_capacity(outer * width);
            for o in 0..outer {
                let base = (o * len + start) * inner;
                data.extend_from_slice(&x.data()[base..base + width]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = end - start;
            Tensor::new(shape, data)
        }
        Primitive::Reshape { shape } => {
            let x = inputs[0];
            if shape.iter().product::<usize>() != x.numel() {
                return Err(unary_err(op, x, shape));
            }
            Tensor::new(shape.clone(), x.data().to_vec())
        }
        Primitive::Transpose => {
            let x = inputs[0];
            if x.ndim() != 2 {
                return Err(unary_err(op, x, &[]));
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = x.data()[i * c + j];
                }
            }
            Tensor::new(vec![c, r], data)
        }
        Primitive::Relu => Ok(inputs[0].map(|x| x.max(0.0))),
        Primitive::Gelu => Ok(inputs[0].map(gelu)),
        Primitive::Sigmoid => Ok(inputs[0].map(sigmoid)),
        Primitive::Log => Ok(inputs[0].map(f64::ln)),
        Primitive::Exp => Ok(inputs[0].map(f64::exp)),
        Primitive::Abs => Ok(inputs[0].map(f64::abs)),
        Primitive::Scale(s) => Ok(inputs[0].map(|x| x * s)),
        Primitive::Softmax => {
            let x = inputs[0];
            let cols = x.last_dim();
            Tensor::new(x.shape().to_vec(), softmax_rows(x.data(), cols))
        }
        Primitive::LogSoftmax => {
            let x = inputs[0];
            let cols = x.last_dim();
            let mut data = vec![0.0; x.numel()];
            for (src, dst) in x.data().chunks(cols).zip(data.chunks_mut(cols)) {
                let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + src.iter().map(|&s| (s - m).exp()).sum::<f64>().ln();
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s - lse;
                }
            }
            Tensor::new(x.shape().to_vec(), data)
        }
        Primitive::LayerNorm { eps } => {
            let x = inputs[0];
            let cols = x.last_dim();
            let mut data = vec![0.0; x.numel()];
            for (src, dst) in x.data().chunks(cols).zip(data.chunks_mut(cols)) {
                let mean = src.iter().sum::<f64>() / cols as f64;
                let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - mean) * inv;
                }
            }
            Tensor::new(x.shape().to_vec(), data)
        }
        Primitive::Sum { axis } | Primitive::Mean { axis } => {
            let x = inputs[0];
            let mean = matches!(op, Primitive::Mean { .. });
            match axis {
                None => {
                    let s = x.sum();
                    Ok(Tensor::scalar(if mean { s / x.numel() as f64 } else { s }))
                }
                Some(ax) => {
                    if *ax >= x.ndim() {
                        return Err(unary_err(op, x, &[*ax]));
                    }
                    let len = x.shape()[*ax] as f64;
                    let r = reduce_axis(x, *ax);
                    Ok(if mean { r.map(|v| v / len) } else { r })
                }
            }
        }
        Primitive::GatherRows { indices } => {
            let x = inputs[0];
            if x.ndim() == 0 || indices.iter().any(|&i| i >= x.shape()[0]) {
                return Err(unary_err(op, x, indices));
            }
            let inner = x.numel() / x.shape()[0];
            let mut data = Vec::with_capacity(indices.len() * inner);
            for &i in indices {
                data.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = indices.len();
            Tensor::new(shape, data)
        }
        Primitive::Im2Col { height, width, kernel, stride, pad } => {
            let x = inputs[0];
            if x.ndim() != 2 || x.shape()[0] != height * width || height + 2 * pad < *kernel || width + 2 * pad < *kernel {
                return Err(unary_err(op, x, &[*height, *width]));
            }
            let c = x.shape()[1];
            let (ho, wo) = im2col_dims(*height, *width, *kernel, *stride, *pad);
            let patch = kernel * kernel * c;
            let mut data = vec![0.0; ho * wo * patch];
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = &mut data[(oy * wo + ox) * patch..(oy * wo + ox + 1) * patch];
                    for ky in 0..*kernel {
                        let iy = (oy * stride + ky) as isize - *pad as isize;
                        if iy < 0 || iy >= *height as isize {
                            continue;
                        }
                        for kx in 0..*kernel {
                            let ix = (ox * stride + kx) as isize - *pad as isize;
                            if ix < 0 || ix >= *width as isize {
                                continue;
                            }
                            let src = (iy as usize * width + ix as usize) * c;
                            let dst = (ky * kernel + kx) * c;
                            row[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
                        }
                    }
                }
            }
            Tensor::new(vec![ho * wo, patch], data)
        }
    }
}

/// Vector-Jacobian products: gradient for each operand given the output
/// gradient. Uses the saved operands and the forward output.
pub fn backward(op: &Primitive, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
    let g = grad.data();
    match op {
        Primitive::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = matmul_nt(g, b.data(), m, n, k);
            let gb = matmul_tn(a.data(), g, m, k, n);
            vec![
                Tensor::new(a.shape().to_vec(), ga).expect("shape"),
                Tensor::new(b.shape().to_vec(), gb).expect("shape"),
            ]
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::Minimum | Primitive::Maximum => {
            let (a, b) = (inputs[0], inputs[1]);
            let (ad, bd) = (a.data(), b.data());
            let (la, lb) = (ad.len(), bd.len());
            let n = g.len();
            let mut ga = vec![0.0; n];
            let mut gb = vec![0.0; n];
            for i in 0..n {
                let (x, y) = (ad[i % la], bd[i % lb]);
                let (da, db) = match op {
                    Primitive::Add => (1.0, 1.0),
                    Primitive::Sub => (1.0, -1.0),
                    Primitive::Mul => (y, x),
                    Primitive::Div => (1.0 / y, -x / (y * y)),
                    // ties route the gradient to the left operand
                    Primitive::Minimum => if x <= y { (1.0, 0.0) } else { (0.0, 1.0) },
                    _ => if x >= y { (1.0, 0.0) } else { (0.0, 1.0) },
                };
                ga[i] = g[i] * da;
                gb[i] = g[i] * db;
            }
            vec![reduce_to(ga, a), reduce_to(gb, b)]
        }
        Primitive::Concat { axis } => {
            let (outer, total, inner) = axis_split(output.shape(), *axis);
            let mut offset = 0;
            inputs
                .iter()
                .map(|t| {
                    let len = t.shape()[*axis];
                    let mut data = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    Tensor::new(t.shape().to_vec(), data).expect("shape")
                })
                .collect()
        }
        Primitive::Slice { axis, start, end } => {
            let x = inputs[0];
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let width = (end - start) * inner;
            let mut data = vec![0.0; x.numel()];
            for o in 0..outer {
                let base = (o * len + start) * inner;
                data[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
            }
            vec![Tensor::new(x.shape().to_vec(), data).expect("shape")]
        }
        Primitive::Reshape { .. } => {
            vec![Tensor::new(inputs[0].shape().to_vec(), g.to_vec()).expect("shape")]
        }
        Primitive::Transpose => {
            let (r, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[i * c + j] = g[j * r + i];
                }
            }
            vec![Tensor::new(vec![r, c], data).expect("shape")]
        }
        Primitive::Relu | Primitive::Gelu | Primitive::Sigmoid | Primitive::Log | Primitive::Exp | Primitive::Abs | Primitive::Scale(_) => {
            let x = inputs[0].data();
            let y = output.data();
            let data = (0..g.len())
                .map(|i| {
                    let d = match op {
                        Primitive::Relu => if x[i] > 0.0 { 1.0 } else { 0.0 },
                        Primitive::Gelu => gelu_grad(x[i]),
                        Primitive::Sigmoid => y[i] * (1.0 - y[i]),
                        Primitive::Log => 1.0 / x[i],
                        Primitive::Exp => y[i],
                        Primitive::Abs => if x[i] > 0.0 { 1.0 } else if x[i] < 0.0 { -1.0 } else { 0.0 },
                        Primitive::Scale(s) => *s,
                        _ => unreachable!(),
                    };
                    g[i] * d
                })
                .collect();
            vec![Tensor::new(inputs[0].shape().to_vec(), data).expect("shape")]
        }
        Primitive::Softmax => {
            let cols = output.last_dim();
            let mut data = vec![0.0; g.len()];
            for ((y, gr), d) in output.data().chunks(cols).zip(g.chunks(cols)).zip(data.chunks_mut(cols)) {
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..cols {
                    d[j] = y[j] * (gr[j] - dot);
                }
            }
            vec![Tensor::new(output.shape().to_vec(), data).expect("shape")]
        }
        Primitive::LogSoftmax => {
            let cols = output.last_dim();
            let mut data = vec![0.0; g.len()];
            for ((y, gr), d) in output.data().chunks(cols).zip(g.chunks(cols)).zip(data.chunks_mut(cols)) {
                let total: f64 = gr.iter().sum();
                for j in 0..cols {
                    d[j] = gr[j] - y[j].exp() * total;
                }
            }
            vec![Tensor::new(output.shape().to_vec(), data).expect("shape")]
        }
        Primitive::LayerNorm { eps } => {
            let x = inputs[0];
            let cols = x.last_dim();
            let n = cols as f64;
            let mut data = vec![0.0; g.len()];
            for (((src, y), gr), d) in x
                .data()
                .chunks(cols)
                .zip(output.data().chunks(cols))
                .zip(g.chunks(cols))
                .zip(data.chunks_mut(cols))
            {
                let mean = src.iter().sum::<f64>() / n;
                let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                let gmean = gr.iter().sum::<f64>() / n;
                let gy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                for j in 0..cols {
                    d[j] = inv * (gr[j] - gmean - y[j] * gy);
                }
            }
            vec![Tensor::new(x.shape().to_vec(), data).expect("shape")]
        }
        Primitive::Sum { axis } | Primitive::Mean { axis } => {
            let x = inputs[0];
            let mean = matches!(op, Primitive::Mean { .. });
            match axis {
                None => {
                    let v = if mean { g[0] / x.numel() as f64 } else { g[0] };
                    vec![Tensor::full(x.shape().to_vec(), v)]
                }
                Some(ax) => {
                    let factor = if mean { 1.0 / x.shape()[*ax] as f64 } else { 1.0 };
                    vec![expand_axis(grad, x.shape(), *ax, factor)]
                }
            }
        }
        Primitive::GatherRows { indices } => {
            let x = inputs[0];
            let inner = x.numel() / x.shape()[0];
            let mut data = vec![0.0; x.numel()];
            for (r, &i) in indices.iter().enumerate() {
                for j in 0..inner {
                    data[i * inner + j] += g[r * inner + j];
                }
            }
            vec![Tensor::new(x.shape().to_vec(), data).expect("shape")]
        }
        Primitive::Im2Col { height, width, kernel, stride, pad } => {
            let x = inputs[0];
            let c = x.shape()[1];
            let (ho, wo) = im2col_dims(*height, *width, *kernel, *stride, *pad);
            let patch = kernel * kernel * c;
            let mut data = vec![0.0; x.numel()];
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = &g[(oy * wo + ox) * patch..(oy * wo + ox + 1) * patch];
                    for ky in 0..*kernel {
                        let iy = (oy * stride + ky) as isize - *pad as isize;
                        if iy < 0 || iy >= *height as isize {
                            continue;
                        }
                        for kx in 0..*kernel {
                            let ix = (ox * stride + kx) as isize - *pad as isize;
                            if ix < 0 || ix >= *width as isize {
                                continue;
                            }
                            let dst = (iy as usize * width + ix as usize) * c;
                            let src = (ky * kernel + kx) * c;
                            for ch in 0..c {
                                data[dst + ch] += row[src + ch];
                            }
                        }
                    }
                }
            }
            vec![Tensor::new(x.shape().to_vec(), data).expect("shape")]
        }
    }
}
