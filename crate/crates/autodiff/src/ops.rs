//! Forward kernels and vector-Jacobian products for every op kind.

use crate::error::{Result, TensorError};
use crate::tensor::{split_axis, strides, Tensor};

/// Operation kinds with their attributes.
///
/// Elementwise binary ops (`Add`, `Sub`, `Mul`, `Div`) broadcast operands of
/// equal rank (after left-padding with unit extents) along unit dimensions.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Rank-2 × rank-2, or rank-3 × rank-3 with a shared leading batch extent.
    MatMul { trans_a: bool, trans_b: bool },
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Softmax { axis: usize },
    /// Normalizes the last axis; inputs are `[x, gain, bias]`.
    LayerNorm { eps: f64 },
    /// Tanh approximation.
    Gelu,
    /// `max(0, x)`.
    Relu,
    Exp,
    Sqrt,
    Mean { axis: usize, keep_dim: bool },
    Sum { axis: usize, keep_dim: bool },
    SumAll,
    /// Divides each fiber along `axis` by its L2 norm; zero fibers stay zero.
    L2Normalize { axis: usize },
    /// L2 norm of each fiber along `axis` (axis removed).
    L2Norm { axis: usize },
    /// Inner product along the last axis of two equally shaped tensors.
    Inner,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    /// Input is a `[vocab, width]` table; output `[ids.len(), width]`.
    EmbeddingLookup { ids: Vec<usize> },
    /// Mean softmax cross-entropy of `[n, classes]` logits against targets.
    CrossEntropy { targets: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Permute { axes: Vec<usize> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu => "gelu",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Sqrt => "sqrt",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
            Op::SumAll => "sum_all",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::L2Norm { .. } => "l2_norm",
            Op::Inner => "inner",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::EmbeddingLookup { .. } => "embedding_lookup",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::MatMul { .. } | Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Inner => Some(2),
            Op::LayerNorm { .. } => Some(3),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// Evaluate `op` on `inputs` without recording anything.
pub fn apply(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    match op.arity() {
        Some(n) if n != inputs.len() => {
            return Err(TensorError::arg(name, format!("expected {n} inputs, got {}", inputs.len())))
        }
        None if inputs.is_empty() => return Err(TensorError::arg(name, "no inputs")),
        _ => {}
    }
    let out = match op {
        Op::MatMul { trans_a, trans_b } => matmul(inputs[0], inputs[1], *trans_a, *trans_b)?,
        Op::Add => binary(name, inputs[0], inputs[1], |a, b| a + b)?,
        Op::Sub => binary(name, inputs[0], inputs[1], |a, b| a - b)?,
        Op::Mul => binary(name, inputs[0], inputs[1], |a, b| a * b)?,
        Op::Div => binary(name, inputs[0], inputs[1], |a, b| a / b)?,
        Op::Scale(c) => unary(inputs[0], |x| c * x),
        Op::AddScalar(c) => unary(inputs[0], |x| x + c),
        Op::Softmax { axis } => softmax(inputs[0], *axis)?,
        Op::LayerNorm { eps } => layer_norm(inputs[0], inputs[1], inputs[2], *eps)?,
        Op::Gelu => unary(inputs[0], gelu),
        Op::Relu => unary(inputs[0], |x| if x < 0.0 { 0.0 } else { x }),
        Op::Exp => unary(inputs[0], f64::exp),
        Op::Sqrt => {
            if inputs[0].data().iter().any(|&x| x < 0.0) {
                return Err(TensorError::Numeric { op: name, msg: "negative input".into() });
            }
            unary(inputs[0], f64::sqrt)
        }
        Op::Mean { axis, keep_dim } => reduce(name, inputs[0], *axis, *keep_dim, true)?,
        Op::Sum { axis, keep_dim } => reduce(name, inputs[0], *axis, *keep_dim, false)?,
        Op::SumAll => Tensor::scalar(inputs[0].data().iter().sum()),
        Op::L2Normalize { axis } => l2_normalize(inputs[0], *axis)?,
        Op::L2Norm { axis } => l2_norm(inputs[0], *axis)?,
        Op::Inner => inner(inputs[0], inputs[1])?,
        Op::Concat { axis } => concat(inputs, *axis)?,
        Op::Slice { axis, start, end } => slice(inputs[0], *axis, *start, *end)?,
        Op::EmbeddingLookup { ids } => embedding_lookup(inputs[0], ids)?,
        Op::CrossEntropy { targets } => cross_entropy(inputs[0], targets)?,
        Op::Reshape { shape } => inputs[0].reshaped(shape)?,
        Op::Permute { axes } => permute(inputs[0], axes)?,
    };
    if !out.is_finite() && inputs.iter().all(|t| t.is_finite()) {
        return Err(TensorError::Numeric {
            op: name,
            msg: format!("non-finite output of shape {:?} from finite inputs", out.shape()),
        });
    }
    Ok(out)
}

/// Gradients of the inputs given the upstream gradient `dy` of the output.
///
/// `needs[i]` false lets the kernel skip input `i`; its slot is then `None`.
pub(crate) fn vjp(
    op: &Op,
    inputs: &[&Tensor],
    out: &Tensor,
    dy: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let x = inputs[0];
    let one = |t: Tensor| vec![Some(t)];
    Ok(match op {
        Op::MatMul { trans_a, trans_b } => {
            matmul_vjp(inputs[0], inputs[1], dy, *trans_a, *trans_b, needs)?
        }
        Op::Add => binary_vjp(inputs[0], inputs[1], dy, needs, |_, _| (1.0, 1.0)),
        Op::Sub => binary_vjp(inputs[0], inputs[1], dy, needs, |_, _| (1.0, -1.0)),
        Op::Mul => binary_vjp(inputs[0], inputs[1], dy, needs, |a, b| (b, a)),
        Op::Div => binary_vjp(inputs[0], inputs[1], dy, needs, |a, b| (1.0 / b, -a / (b * b))),
        Op::Scale(c) => one(zip_map(dy, dy, |g, _| c * g)),
        Op::AddScalar(_) | Op::Reshape { .. } => one(dy.reshaped(x.shape())?),
        Op::Softmax { axis } => one(softmax_vjp(out, dy, *axis)),
        Op::LayerNorm { eps } => layer_norm_vjp(x, inputs[1], dy, *eps),
        Op::Gelu => one(zip_map(dy, x, |g, v| g * gelu_grad(v))),
        Op::Relu => one(zip_map(dy, x, |g, v| if v > 0.0 { g } else { 0.0 })),
        Op::Exp => one(zip_map(dy, out, |g, y| g * y)),
        Op::Sqrt => one(zip_map(dy, out, |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 })),
        Op::Mean { axis, .. } => one(reduce_vjp(x, dy, *axis, true)),
        Op::Sum { axis, .. } => one(reduce_vjp(x, dy, *axis, false)),
        Op::SumAll => one(Tensor::full(x.shape(), dy.item())),
        Op::L2Normalize { axis } => one(l2_normalize_vjp(x, out, dy, *axis)),
        Op::L2Norm { axis } => one(l2_norm_vjp(x, out, dy, *axis)),
        Op::Inner => {
            let (a, b) = (inputs[0], inputs[1]);
            let d = *a.shape().last().unwrap_or(&1);
            let mut ga = vec![0.0; a.numel()];
            let mut gb = vec![0.0; b.numel()];
            for (r, &g) in dy.data().iter().enumerate() {
                for j in r * d..(r + 1) * d {
                    ga[j] = g * b.data()[j];
                    gb[j] = g * a.data()[j];
                }
            }
            vec![
                Some(Tensor::from_parts(a.shape().to_vec(), ga)),
                Some(Tensor::from_parts(b.shape().to_vec(), gb)),
            ]
        }
        Op::Concat { axis } => concat_vjp(inputs, dy, *axis),
        Op::Slice { axis, start, .. } => one(slice_vjp(x, dy, *axis, *start)),
        Op::EmbeddingLookup { ids } => {
            let w = x.shape()[1];
            let mut g = vec![0.0; x.numel()];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..w {
                    g[id * w + j] += dy.data()[r * w + j];
                }
            }
            one(Tensor::from_parts(x.shape().to_vec(), g))
        }
        Op::CrossEntropy { targets } => one(cross_entropy_vjp(x, targets, dy.item())),
        Op::Permute { axes } => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            one(permute(dy, &inv)?)
        }
    })
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&u, &v)| f(u, v)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

// ---- broadcasting ---------------------------------------------------------

fn broadcast_shape(name: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut p = vec![1; rank - s.len()];
        p.extend_from_slice(s);
        p
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            (x, y) if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(TensorError::dims(name, &[a, b])),
        })
        .collect()
}

/// Offset into an operand of shape `shape` for every linear index of `out`,
/// or `None` when the operand already has the output shape.
fn broadcast_offsets(out: &[usize], shape: &[usize]) -> Option<Vec<usize>> {
    if out == shape {
        return None;
    }
    let rank = out.len();
    let mut padded = vec![1; rank - shape.len()];
    padded.extend_from_slice(shape);
    let own = strides(&padded);
    let eff: Vec<usize> = (0..rank).map(|d| if padded[d] == 1 { 0 } else { own[d] }).collect();
    let n: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(offsets)
}

fn binary(name: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return Ok(zip_map(a, b, f));
    }
    let out = broadcast_shape(name, a.shape(), b.shape())?;
    let oa = broadcast_offsets(&out, a.shape());
    let ob = broadcast_offsets(&out, b.shape());
    let n: usize = out.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = (0..n)
        .map(|i| {
            let ia = oa.as_ref().map_or(i, |o| o[i]);
            let ib = ob.as_ref().map_or(i, |o| o[i]);
            f(ad[ia], bd[ib])
        })
        .collect();
    Ok(Tensor::from_parts(out, data))
}

fn binary_vjp(
    a: &Tensor,
    b: &Tensor,
    dy: &Tensor,
    needs: &[bool],
    partials: impl Fn(f64, f64) -> (f64, f64),
) -> Vec<Option<Tensor>> {
    let out = dy.shape();
    let oa = broadcast_offsets(out, a.shape());
    let ob = broadcast_offsets(out, b.shape());
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    let (ad, bd) = (a.data(), b.data());
    for (i, &g) in dy.data().iter().enumerate() {
        let ia = oa.as_ref().map_or(i, |o| o[i]);
        let ib = ob.as_ref().map_or(i, |o| o[i]);
        let (pa, pb) = partials(ad[ia], bd[ib]);
        ga[ia] += g * pa;
        gb[ib] += g * pb;
    }
    vec![
        needs[0].then(|| Tensor::from_parts(a.shape().to_vec(), ga)),
        needs[1].then(|| Tensor::from_parts(b.shape().to_vec(), gb)),
    ]
}

// ---- matmul ---------------------------------------------------------------

/// `out += op(a) · op(b)` for row-major `a` (`ar × ac`) and `b` (`br × bc`).
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], ar: usize, ac: usize, ta: bool, b: &[f64], br: usize, bc: usize, tb: bool, out: &mut [f64]) {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    debug_assert_eq!(k, if tb { bc } else { br });
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * ac + p];
                    let brow = &b[p * bc..(p + 1) * bc];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * ac..(i + 1) * ac];
                for j in 0..n {
                    let brow = &b[j * bc..(j + 1) * bc];
                    let mut s = 0.0;
                    for (&x, &y) in arow.iter().zip(brow) {
                        s += x * y;
                    }
                    out[i * n + j] += s;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let arow = &a[p * ac..(p + 1) * ac];
                let brow = &b[p * bc..(p + 1) * bc];
                for i in 0..m {
                    let av = arow[i];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * ac + i] * b[j * bc + p];
                    }
                    out[i * n + j] += s;
                }
            }
        }
    }
}

/// (batch, rows, cols) of a rank-2 or rank-3 operand.
fn mat_dims(t: &Tensor) -> Option<(usize, usize, usize)> {
    match t.shape() {
        [r, c] => Some((1, *r, *c)),
        [b, r, c] => Some((*b, *r, *c)),
        _ => None,
    }
}

fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let err = || TensorError::dims("matmul", &[a.shape(), b.shape()]);
    let (ba, ar, ac) = mat_dims(a).ok_or_else(err)?;
    let (bb, br, bc) = mat_dims(b).ok_or_else(err)?;
    if a.rank() != b.rank() || ba != bb {
        return Err(err());
    }
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(err());
    }
    let mut out = vec![0.0; ba * m * n];
    for bi in 0..ba {
        gemm(
            &a.data()[bi * ar * ac..(bi + 1) * ar * ac],
            ar,
            ac,
            ta,
            &b.data()[bi * br * bc..(bi + 1) * br * bc],
            br,
            bc,
            tb,
            &mut out[bi * m * n..(bi + 1) * m * n],
        );
    }
    let shape = if a.rank() == 2 { vec![m, n] } else { vec![ba, m, n] };
    Ok(Tensor::from_parts(shape, out))
}

fn matmul_vjp(a: &Tensor, b: &Tensor, dy: &Tensor, ta: bool, tb: bool, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    // dA = dC·op(B)ᵀ (transposed back when A was transposed); likewise dB.
    let ga = if needs[0] {
        Some(if ta { matmul(b, dy, tb, true)? } else { matmul(dy, b, false, !tb)? })
    } else {
        None
    };
    let gb = if needs[1] {
        Some(if tb { matmul(dy, a, true, ta)? } else { matmul(a, dy, !ta, false)? })
    } else {
        None
    };
    Ok(vec![ga, gb])
}

// ---- normalization --------------------------------------------------------

fn check_axis(name: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(TensorError::arg(name, format!("axis {axis} out of range for shape {:?}", t.shape())));
    }
    Ok(())
}

fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", x, axis)?;
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = vec![0.0; x.numel()];
    let xd = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                mx = mx.max(xd[base + j * inner]);
            }
            let mut s = 0.0;
            for j in 0..n {
                let e = (xd[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                s += e;
            }
            for j in 0..n {
                out[base + j * inner] /= s;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn softmax_vjp(y: &Tensor, dy: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(y.shape(), axis);
    let (yd, gd) = (y.data(), dy.data());
    let mut g = vec![0.0; y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = 0.0;
            for j in 0..n {
                dot += yd[base + j * inner] * gd[base + j * inner];
            }
            for j in 0..n {
                let k = base + j * inner;
                g[k] = yd[k] * (gd[k] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), g)
}

fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x.shape().last().ok_or_else(|| TensorError::arg("layer_norm", "scalar input"))?;
    if gain.numel() != d || bias.numel() != d || gain.rank() != 1 || bias.rank() != 1 {
        return Err(TensorError::dims("layer_norm", &[x.shape(), gain.shape(), bias.shape()]));
    }
    let mut out = vec![0.0; x.numel()];
    for (row, orow) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let (mean, inv) = row_stats(row, eps);
        for j in 0..d {
            orow[j] = gain.data()[j] * (row[j] - mean) * inv + bias.data()[j];
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Mean and reciprocal standard deviation of one row.
fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn layer_norm_vjp(x: &Tensor, gain: &Tensor, dy: &Tensor, eps: f64) -> Vec<Option<Tensor>> {
    let d = *x.shape().last().unwrap();
    let mut gx = vec![0.0; x.numel()];
    let mut gg = vec![0.0; d];
    let mut gbias = vec![0.0; d];
    let gd = gain.data();
    let mut xhat = vec![0.0; d];
    let mut gyh = vec![0.0; d];
    for ((row, drow), grow) in x.data().chunks(d).zip(dy.data().chunks(d)).zip(gx.chunks_mut(d)) {
        let (mean, inv) = row_stats(row, eps);
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            xhat[j] = (row[j] - mean) * inv;
            gyh[j] = drow[j] * gd[j];
            m1 += gyh[j];
            m2 += gyh[j] * xhat[j];
            gg[j] += drow[j] * xhat[j];
            gbias[j] += drow[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for j in 0..d {
            grow[j] = inv * (gyh[j] - m1 - xhat[j] * m2);
        }
    }
    vec![
        Some(Tensor::from_parts(x.shape().to_vec(), gx)),
        Some(Tensor::from_parts(vec![d], gg)),
        Some(Tensor::from_parts(vec![d], gbias)),
    ]
}

fn reduced_shape(shape: &[usize], axis: usize, keep_dim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keep_dim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

fn reduce(name: &'static str, x: &Tensor, axis: usize, keep_dim: bool, mean: bool) -> Result<Tensor> {
    check_axis(name, x, axis)?;
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    let xd = x.data();
    for o in 0..outer {
        for j in 0..n {
            let src = &xd[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *acc += v;
            }
        }
    }
    if mean {
        for v in &mut out {
            *v /= n as f64;
        }
    }
    Ok(Tensor::from_parts(reduced_shape(x.shape(), axis, keep_dim), out))
}

fn reduce_vjp(x: &Tensor, dy: &Tensor, axis: usize, mean: bool) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let scale = if mean { 1.0 / n as f64 } else { 1.0 };
    let mut g = vec![0.0; x.numel()];
    for o in 0..outer {
        for j in 0..n {
            for i in 0..inner {
                g[(o * n + j) * inner + i] = scale * dy.data()[o * inner + i];
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), g)
}

/// Visit each fiber along `axis`: `f(fiber_index, element offsets)`.
fn fibers(shape: &[usize], axis: usize, mut f: impl FnMut(usize, &mut dyn Iterator<Item = usize>)) {
    let (outer, n, inner) = split_axis(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut it = (0..n).map(|j| base + j * inner);
            f(o * inner + i, &mut it);
        }
    }
}

fn fiber_norms(x: &Tensor, axis: usize) -> Vec<f64> {
    let (outer, _, inner) = split_axis(x.shape(), axis);
    let mut norms = vec![0.0; outer * inner];
    let xd = x.data();
    fibers(x.shape(), axis, |f, it| {
        norms[f] = it.map(|k| xd[k] * xd[k]).sum::<f64>().sqrt();
    });
    norms
}

fn l2_normalize(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("l2_normalize", x, axis)?;
    let norms = fiber_norms(x, axis);
    let mut out = vec![0.0; x.numel()];
    let xd = x.data();
    fibers(x.shape(), axis, |f, it| {
        // a zero fiber stays zero; NaN norms propagate
        if norms[f] != 0.0 {
            for k in it {
                out[k] = xd[k] / norms[f];
            }
        }
    });
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn l2_normalize_vjp(x: &Tensor, y: &Tensor, dy: &Tensor, axis: usize) -> Tensor {
    let norms = fiber_norms(x, axis);
    let (yd, gd) = (y.data(), dy.data());
    let mut g = vec![0.0; x.numel()];
    fibers(x.shape(), axis, |f, it| {
        if norms[f] > 0.0 {
            let idx: Vec<usize> = it.collect();
            let dot: f64 = idx.iter().map(|&k| yd[k] * gd[k]).sum();
            for k in idx {
                g[k] = (gd[k] - yd[k] * dot) / norms[f];
            }
        }
    });
    Tensor::from_parts(x.shape().to_vec(), g)
}

fn l2_norm(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("l2_norm", x, axis)?;
    Ok(Tensor::from_parts(reduced_shape(x.shape(), axis, false), fiber_norms(x, axis)))
}

fn l2_norm_vjp(x: &Tensor, y: &Tensor, dy: &Tensor, axis: usize) -> Tensor {
    let (xd, yd, gd) = (x.data(), y.data(), dy.data());
    let mut g = vec![0.0; x.numel()];
    fibers(x.shape(), axis, |f, it| {
        if yd[f] > 0.0 {
            for k in it {
                g[k] = gd[f] * xd[k] / yd[f];
            }
        }
    });
    Tensor::from_parts(x.shape().to_vec(), g)
}

fn inner(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.rank() == 0 {
        return Err(TensorError::dims("inner", &[a.shape(), b.shape()]));
    }
    let d = *a.shape().last().unwrap();
    let data = a
        .data()
        .chunks(d)
        .zip(b.data().chunks(d))
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u * v).sum())
        .collect();
    Ok(Tensor::from_parts(a.shape()[..a.rank() - 1].to_vec(), data))
}

// ---- shape ops ------------------------------------------------------------

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs[0];
    check_axis("concat", first, axis)?;
    for t in inputs {
        let ok = t.rank() == first.rank()
            && (0..t.rank()).all(|d| d == axis || t.shape()[d] == first.shape()[d]);
        if !ok {
            return Err(TensorError::dims("concat", &[first.shape(), t.shape()]));
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let total: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let w = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

fn concat_vjp(inputs: &[&Tensor], dy: &Tensor, axis: usize) -> Vec<Option<Tensor>> {
    let mut start = 0;
    inputs
        .iter()
        .map(|t| {
            let len = t.shape()[axis];
            let g = slice(dy, axis, start, start + len).expect("concat slice");
            start += len;
            Some(g)
        })
        .collect()
}

fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    check_axis("slice", x, axis)?;
    if start >= end || end > x.shape()[axis] {
        return Err(TensorError::arg(
            "slice",
            format!("range {start}..{end} invalid for extent {}", x.shape()[axis]),
        ));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        out.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + end) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = end - start;
    Ok(Tensor::from_parts(shape, out))
}

fn slice_vjp(x: &Tensor, dy: &Tensor, axis: usize, start: usize) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let len = dy.shape()[axis];
    let mut g = vec![0.0; x.numel()];
    for o in 0..outer {
        g[(o * n + start) * inner..(o * n + start + len) * inner]
            .copy_from_slice(&dy.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(x.shape().to_vec(), g)
}

fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(TensorError::arg("permute", format!("axes {axes:?} invalid for rank {rank}")));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let xd = x.data();
    for _ in 0..n {
        out.push(xd[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let [vocab, w] = table.shape() else {
        return Err(TensorError::dims("embedding_lookup", &[table.shape()]));
    };
    if ids.is_empty() {
        return Err(TensorError::arg("embedding_lookup", "empty id list"));
    }
    let mut out = Vec::with_capacity(ids.len() * w);
    for &id in ids {
        if id >= *vocab {
            return Err(TensorError::arg("embedding_lookup", format!("id {id} >= vocabulary {vocab}")));
        }
        out.extend_from_slice(&table.data()[id * w..(id + 1) * w]);
    }
    Ok(Tensor::from_parts(vec![ids.len(), *w], out))
}

fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let [n, c] = logits.shape() else {
        return Err(TensorError::dims("cross_entropy", &[logits.shape()]));
    };
    if targets.len() != *n {
        return Err(TensorError::dims("cross_entropy", &[logits.shape(), &[targets.len()]]));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= *c) {
        return Err(TensorError::arg("cross_entropy", format!("target {t} >= classes {c}")));
    }
    let mut total = 0.0;
    for (row, &t) in logits.data().chunks(*c).zip(targets) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(Tensor::scalar(total / *n as f64))
}

fn cross_entropy_vjp(logits: &Tensor, targets: &[usize], g: f64) -> Tensor {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut out = vec![0.0; logits.numel()];
    for ((row, orow), &t) in logits.data().chunks(c).zip(out.chunks_mut(c)).zip(targets) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for j in 0..c {
            orow[j] = g * ((row[j] - mx).exp() / s) / n as f64;
        }
        orow[t] -= g / n as f64;
    }
    Tensor::from_parts(logits.shape().to_vec(), out)
}
