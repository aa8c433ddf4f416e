//! Numeric kernels behind each op kind, plus shape inference.

use super::{AutodiffError, Op, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

/// Per-target-dimension strides into `src`, zero where `src` is broadcast.
///
/// Shapes align from the right, numpy style; a source dimension must equal the
/// target dimension or be 1.
fn broadcast_strides(src: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if src.len() > target.len() {
        return None;
    }
    let offset = target.len() - src.len();
    let mut strides = vec![0; target.len()];
    let mut stride = 1;
    for i in (0..src.len()).rev() {
        let t = target[i + offset];
        if src[i] == t {
            strides[i + offset] = if t == 1 { 0 } else { stride };
        } else if src[i] != 1 {
            return None;
        }
        stride *= src[i];
    }
    Some(strides)
}

/// Calls `f(target_linear, src_linear)` for every element of the target shape.
fn for_each_broadcast(target: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = target.iter().product();
    if target.is_empty() {
        f(0, 0);
        return;
    }
    let rank = target.len();
    let inner = target[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut out = 0;
    while out < n {
        let base: usize = idx.iter().zip(strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            f(out + j, base + j * inner_stride);
        }
        out += inner;
        // advance the outer multi-index
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        _ => {
            let cols = shape[shape.len() - 1];
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}

fn mat_dims(shape: &[usize], transposed: bool) -> Option<(usize, usize)> {
    if shape.len() != 2 {
        return None;
    }
    Some(if transposed {
        (shape[1], shape[0])
    } else {
        (shape[0], shape[1])
    })
}

pub(crate) fn infer_shape(op: &Op, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    let name = op.name();
    let same = |a: &[usize], b: &[usize]| -> Result<Vec<usize>> {
        if a == b {
            Ok(a.to_vec())
        } else {
            Err(mismatch(name, &[a, b]))
        }
    };
    match op {
        Op::Input | Op::Param => unreachable!("leaves carry their own shape"),
        Op::MatMul { lhs_t, rhs_t } => {
            let (m, k) = mat_dims(inputs[0], *lhs_t).ok_or_else(|| mismatch(name, inputs))?;
            let (k2, n) = mat_dims(inputs[1], *rhs_t).ok_or_else(|| mismatch(name, inputs))?;
            if k != k2 {
                return Err(mismatch(name, inputs));
            }
            Ok(vec![m, n])
        }
        Op::Transpose => {
            let (r, c) = mat_dims(inputs[0], false).ok_or_else(|| mismatch(name, inputs))?;
            Ok(vec![c, r])
        }
        Op::Add | Op::Sub | Op::Mul | Op::Div => same(inputs[0], inputs[1]),
        Op::Neg
        | Op::Scale(_)
        | Op::AddScalar(_)
        | Op::Exp
        | Op::Log
        | Op::Relu
        | Op::Step
        | Op::Sigmoid
        | Op::Tanh
        | Op::Square
        | Op::Sqrt => Ok(inputs[0].to_vec()),
        Op::Sum | Op::Mean => Ok(Vec::new()),
        Op::Broadcast(target) => {
            broadcast_strides(inputs[0], target).ok_or_else(|| mismatch(name, &[inputs[0], target]))?;
            Ok(target.clone())
        }
        Op::SumTo(target) => {
            broadcast_strides(target, inputs[0]).ok_or_else(|| mismatch(name, &[inputs[0], target]))?;
            Ok(target.clone())
        }
        Op::Reshape(target) => {
            if target.iter().product::<usize>() != inputs[0].iter().product::<usize>() {
                return Err(mismatch(name, &[inputs[0], target]));
            }
            Ok(target.clone())
        }
        Op::Concat => {
            let first = inputs[0];
            if first.is_empty() {
                return Err(mismatch(name, inputs));
            }
            let lead = &first[..first.len() - 1];
            let mut cols = 0;
            for s in inputs {
                if s.len() != first.len() || &s[..s.len() - 1] != lead {
                    return Err(mismatch(name, inputs));
                }
                cols += s[s.len() - 1];
            }
            let mut out = lead.to_vec();
            out.push(cols);
            Ok(out)
        }
        Op::Slice { start, end } => {
            let s = inputs[0];
            if s.is_empty() || start >= end || *end > s[s.len() - 1] {
                return Err(mismatch(name, inputs));
            }
            let mut out = s.to_vec();
            *out.last_mut().unwrap() = end - start;
            Ok(out)
        }
        Op::Pad { before, width } => {
            let s = inputs[0];
            if s.is_empty() || before + s[s.len() - 1] > *width {
                return Err(mismatch(name, inputs));
            }
            let mut out = s.to_vec();
            *out.last_mut().unwrap() = *width;
            Ok(out)
        }
        Op::Softmax => {
            if inputs[0].len() != 2 {
                return Err(mismatch(name, inputs));
            }
            Ok(inputs[0].to_vec())
        }
        Op::SoftmaxCrossEntropy(labels) => {
            let s = inputs[0];
            if s.len() != 2 || s[0] != labels.len() {
                return Err(mismatch(name, inputs));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
                return Err(AutodiffError::LabelOutOfRange {
                    label: bad,
                    classes: s[1],
                });
            }
            Ok(Vec::new())
        }
        Op::L2NormRows => {
            let s = inputs[0];
            if s.len() != 2 {
                return Err(mismatch(name, inputs));
            }
            Ok(vec![s[0]])
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor, lhs_t: bool, rhs_t: bool) -> Tensor {
    let (m, k) = mat_dims(a.shape(), lhs_t).expect("validated");
    let (_, n) = mat_dims(b.shape(), rhs_t).expect("validated");
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (_, bc) = (b.shape()[0], b.shape()[1]);
    let (rsa, csa) = if lhs_t { (1, ac) } else { (ac, 1) };
    let (rsb, csb) = if rhs_t { (1, bc) } else { (bc, 1) };
    let _ = ar;
    let mut out = vec![0.0; m * n];
    // SAFETY: strides describe the row-major buffers owned by `a`, `b` and
    // `out`, whose sizes were validated by shape inference.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            rsa as isize,
            csa as isize,
            b.data().as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::from_parts(vec![m, n], out)
}

pub(crate) fn broadcast(src: &Tensor, target: &[usize]) -> Tensor {
    let strides = broadcast_strides(src.shape(), target).expect("validated");
    let n: usize = target.iter().product();
    let mut out = vec![0.0; n];
    let s = src.data();
    for_each_broadcast(target, &strides, |o, i| out[o] = s[i]);
    Tensor::from_parts(target.to_vec(), out)
}

pub(crate) fn sum_to(src: &Tensor, target: &[usize]) -> Tensor {
    let strides = broadcast_strides(target, src.shape()).expect("validated");
    let mut out = vec![0.0; target.iter().product()];
    let s = src.data();
    for_each_broadcast(src.shape(), &strides, |i, o| out[o] += s[i]);
    Tensor::from_parts(target.to_vec(), out)
}

fn concat(inputs: &[&Tensor], out_shape: &[usize]) -> Tensor {
    let (rows, cols) = split_last(out_shape);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for t in inputs {
            let c = t.cols();
            out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
        }
    }
    Tensor::from_parts(out_shape.to_vec(), out)
}

fn slice(src: &Tensor, start: usize, end: usize, out_shape: &[usize]) -> Tensor {
    let (rows, cols) = split_last(src.shape());
    let mut out = Vec::with_capacity(rows * (end - start));
    for r in 0..rows {
        out.extend_from_slice(&src.data()[r * cols + start..r * cols + end]);
    }
    Tensor::from_parts(out_shape.to_vec(), out)
}

fn pad(src: &Tensor, before: usize, out_shape: &[usize]) -> Tensor {
    let (rows, cols) = split_last(src.shape());
    let width = out_shape[out_shape.len() - 1];
    let mut out = vec![0.0; rows * width];
    for r in 0..rows {
        out[r * width + before..r * width + before + cols]
            .copy_from_slice(&src.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::from_parts(out_shape.to_vec(), out)
}

pub(crate) fn softmax_rows(src: &Tensor) -> Tensor {
    let cols = src.cols();
    let mut out = src.data().to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::from_parts(src.shape().to_vec(), out)
}

fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Tensor {
    let cols = logits.cols();
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(cols).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[y];
    }
    Tensor::scalar(total / labels.len() as f64)
}

fn l2_norm_rows(src: &Tensor) -> Tensor {
    let cols = src.cols();
    let data = src
        .data()
        .chunks(cols)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Tensor::from_parts(vec![src.rows()], data)
}

/// Evaluates a non-leaf op on already-evaluated inputs of validated shape.
pub(crate) fn eval(op: &Op, inputs: &[&Tensor], out_shape: &[usize]) -> Tensor {
    let x = inputs[0];
    match op {
        Op::Input | Op::Param => unreachable!("leaves are bound, not evaluated"),
        Op::MatMul { lhs_t, rhs_t } => matmul(x, inputs[1], *lhs_t, *rhs_t),
        Op::Transpose => {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x.data()[i * c + j];
                }
            }
            Tensor::from_parts(vec![c, r], out)
        }
        Op::Add => zip(x, inputs[1], |a, b| a + b),
        Op::Sub => zip(x, inputs[1], |a, b| a - b),
        Op::Mul => zip(x, inputs[1], |a, b| a * b),
        Op::Div => zip(x, inputs[1], |a, b| a / b),
        Op::Neg => x.map(|v| -v),
        Op::Scale(c) => x.map(|v| c * v),
        Op::AddScalar(c) => x.map(|v| v + c),
        Op::Exp => x.map(f64::exp),
        Op::Log => x.map(f64::ln),
        Op::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::Step => x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        Op::Sigmoid => x.map(|v| 1.0 / (1.0 + (-v).exp())),
        Op::Tanh => x.map(f64::tanh),
        Op::Square => x.map(|v| v * v),
        Op::Sqrt => x.map(f64::sqrt),
        Op::Sum => Tensor::scalar(x.sum()),
        Op::Mean => Tensor::scalar(x.mean()),
        Op::Broadcast(target) => broadcast(x, target),
        Op::SumTo(target) => sum_to(x, target),
        Op::Reshape(target) => Tensor::from_parts(target.clone(), x.data().to_vec()),
        Op::Concat => concat(inputs, out_shape),
        Op::Slice { start, end } => slice(x, *start, *end, out_shape),
        Op::Pad { before, .. } => pad(x, *before, out_shape),
        Op::Softmax => softmax_rows(x),
        Op::SoftmaxCrossEntropy(labels) => softmax_cross_entropy(x, labels),
        Op::L2NormRows => l2_norm_rows(x),
    }
}
