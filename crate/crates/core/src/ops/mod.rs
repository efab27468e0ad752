//! Differentiable operations recorded on a [`Tape`].
//!
//! Binary elementwise ops broadcast only over leading axes: the smaller
//! operand's shape (after dropping leading singleton axes) must equal the
//! trailing axes of the larger one.

mod conv;
pub(crate) mod gemm;
mod nn;
mod norm;

pub use conv::{
    avg_pool2, conv2d, global_avg_pool, mask_channels, mask_spatial, nearest_upsample,
    nearest_upsample_tensor, pointwise_conv,
};
pub use nn::{cross_entropy, gru_cell, linear, straight_through, GruParams};
pub use norm::{channel_norm, NormMode, NormStats, NORM_EPS, NORM_MOMENTUM};

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use gemm::{gemm, MatRef};

fn tape_of<'a>(a: &'a Var) -> &'a Tape {
    a.tape()
}

fn strip_leading_ones(s: &[usize]) -> &[usize] {
    let k = s.iter().take_while(|&&e| e == 1).count();
    if k == s.len() {
        &s[s.len().saturating_sub(1)..]
    } else {
        &s[k..]
    }
}

/// Number of times `small` repeats inside `big` under leading-axis broadcasting.
fn broadcast_reps(big: &[usize], small: &[usize]) -> Option<usize> {
    let small = strip_leading_ones(small);
    if small.len() > big.len() || big[big.len() - small.len()..] != *small {
        return None;
    }
    let inner: usize = small.iter().product();
    Some(big.iter().product::<usize>() / inner)
}

/// Sums `g` (shape of the big operand) down to `small_len` by folding the repeats.
fn fold_repeats(g: &[f64], small_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; small_len];
    for chunk in g.chunks_exact(small_len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
}

fn binary(a: &Var, b: &Var, op: Bin) -> Result<Var> {
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    // Commutative ops may swap so the broadcast operand is second.
    let (big, small) = if broadcast_reps(&sa, &sb).is_some() {
        (a, b)
    } else if !matches!(op, Bin::Sub) && broadcast_reps(&sb, &sa).is_some() {
        (b, a)
    } else {
        return Err(Error::dim(format!(
            "cannot broadcast shapes {sa:?} and {sb:?}"
        )));
    };
    let bv = big.shared_value();
    let sv = small.shared_value();
    let n_small = sv.len();
    let mut out = Vec::with_capacity(bv.len());
    for chunk in bv.data().chunks_exact(n_small) {
        for (x, y) in chunk.iter().zip(sv.data()) {
            out.push(match op {
                Bin::Add => x + y,
                Bin::Sub => x - y,
                Bin::Mul => x * y,
            });
        }
    }
    let value = Tensor::new(bv.shape(), out)?;
    let small_shape = sv.shape().to_vec();
    let big_shape = bv.shape().to_vec();
    Ok(tape_of(a).push(value, &[big, small], move |g, needs| {
        let gd = g.data();
        let g_big = needs[0].then(|| match op {
            Bin::Add | Bin::Sub => g.clone(),
            Bin::Mul => {
                let d: Vec<f64> = gd
                    .chunks_exact(n_small)
                    .flat_map(|c| c.iter().zip(sv.data()).map(|(g, s)| g * s))
                    .collect();
                Tensor::new(&big_shape, d).unwrap()
            }
        });
        let g_small = needs[1].then(|| {
            let folded = match op {
                Bin::Add => fold_repeats(gd, n_small),
                Bin::Sub => fold_repeats(gd, n_small).into_iter().map(|v| -v).collect(),
                Bin::Mul => {
                    let prod: Vec<f64> = gd.iter().zip(bv.data()).map(|(g, b)| g * b).collect();
                    fold_repeats(&prod, n_small)
                }
            };
            Tensor::new(&small_shape, folded).unwrap()
        });
        vec![g_big, g_small]
    }))
}

/// Elementwise sum with leading-axis broadcasting.
pub fn add(a: &Var, b: &Var) -> Result<Var> {
    binary(a, b, Bin::Add)
}

/// `a - b`; only `b` may be broadcast.
pub fn sub(a: &Var, b: &Var) -> Result<Var> {
    binary(a, b, Bin::Sub)
}

/// Elementwise product with leading-axis broadcasting.
pub fn mul(a: &Var, b: &Var) -> Result<Var> {
    binary(a, b, Bin::Mul)
}

/// Unary elementwise op; `df(x, y)` is the local derivative given input and output.
fn unary(a: &Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
    let x = a.shared_value();
    let y = Rc::new(x.map(f));
    let y_out = (*y).clone();
    tape_of(a).push(y_out, &[a], move |g, _| {
        let d: Vec<f64> = g
            .data()
            .iter()
            .zip(x.data().iter().zip(y.data()))
            .map(|(g, (&xv, &yv))| g * df(xv, yv))
            .collect();
        vec![Some(Tensor::new(x.shape(), d).unwrap())]
    })
}

pub fn scale(a: &Var, s: f64) -> Var {
    unary(a, move |x| x * s, move |_, _| s)
}

pub fn add_scalar(a: &Var, s: f64) -> Var {
    unary(a, move |x| x + s, |_, _| 1.0)
}

fn note_zero_kink(a: &Var) {
    let margin = a
        .value()
        .data()
        .iter()
        .map(|v| v.abs())
        .fold(f64::INFINITY, f64::min);
    a.tape().note_kink(margin);
}

pub fn relu(a: &Var) -> Var {
    note_zero_kink(a);
    unary(
        a,
        |x| if x > 0.0 { x } else { 0.0 },
        |x, _| if x > 0.0 { 1.0 } else { 0.0 },
    )
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: &Var) -> Var {
    unary(a, sigmoid_scalar, |_, y| y * (1.0 - y))
}

pub fn tanh(a: &Var) -> Var {
    unary(a, f64::tanh, |_, y| 1.0 - y * y)
}

/// `max(0, x)²`, a continuously differentiable hinge. Its second
/// derivative jumps at 0, which is recorded as a kink.
pub fn sq_hinge(a: &Var) -> Var {
    note_zero_kink(a);
    unary(
        a,
        |x| if x > 0.0 { x * x } else { 0.0 },
        |x, _| if x > 0.0 { 2.0 * x } else { 0.0 },
    )
}

/// Sum of all entries, as a shape-`[1]` scalar.
pub fn sum(a: &Var) -> Var {
    let x = a.shared_value();
    let shape = x.shape().to_vec();
    tape_of(a).push(Tensor::scalar(x.sum()), &[a], move |g, _| {
        vec![Some(Tensor::full(&shape, g.item()))]
    })
}

pub fn mean(a: &Var) -> Var {
    let n = a.value().len() as f64;
    scale(&sum(a), 1.0 / n)
}

pub fn reshape(a: &Var, shape: &[usize]) -> Result<Var> {
    let value = a.value().clone().reshape(shape)?;
    let orig = a.shape().to_vec();
    Ok(tape_of(a).push(value, &[a], move |g, _| {
        vec![Some(g.clone().reshape(&orig).unwrap())]
    }))
}

fn transpose_data(d: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = d[i * cols + j];
        }
    }
    out
}

pub fn transpose(a: &Var) -> Result<Var> {
    let &[r, c] = a.shape() else {
        return Err(Error::dim(format!("transpose needs a matrix, got {:?}", a.shape())));
    };
    let value = Tensor::new(&[c, r], transpose_data(a.value().data(), r, c))?;
    Ok(tape_of(a).push(value, &[a], move |g, _| {
        vec![Some(Tensor::new(&[r, c], transpose_data(g.data(), c, r)).unwrap())]
    }))
}

fn matrix_dims(v: &Var, which: &str) -> Result<(usize, usize)> {
    match v.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::dim(format!("matmul {which} operand must be a matrix, got {s:?}"))),
    }
}

/// Matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Var, b: &Var) -> Result<Var> {
    let (m, k) = matrix_dims(a, "left")?;
    let (k2, n) = matrix_dims(b, "right")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let av = a.shared_value();
    let bv = b.shared_value();
    let mut out = vec![0.0; m * n];
    gemm(MatRef::new(av.data(), m, k), MatRef::new(bv.data(), k, n), 0.0, &mut out);
    let value = Tensor::new(&[m, n], out)?;
    Ok(tape_of(a).push(value, &[a, b], move |g, needs| {
        let gm = MatRef::new(g.data(), m, n);
        let da = needs[0].then(|| {
            let mut d = vec![0.0; m * k];
            gemm(gm, MatRef::new(bv.data(), k, n).t(), 0.0, &mut d);
            Tensor::new(&[m, k], d).unwrap()
        });
        let db = needs[1].then(|| {
            let mut d = vec![0.0; k * n];
            gemm(MatRef::new(av.data(), m, k).t(), gm, 0.0, &mut d);
            Tensor::new(&[k, n], d).unwrap()
        });
        vec![da, db]
    }))
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn softmax_values(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    if len == 0 {
        return Err(Error::dim("softmax over an empty axis"));
    }
    let xd = x.data();
    let mut y = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..len {
                let e = (xd[at(j)] - max).exp();
                y[at(j)] = e;
                z += e;
            }
            for j in 0..len {
                y[at(j)] /= z;
            }
        }
    }
    Tensor::new(x.shape(), y)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(a: &Var, axis: usize) -> Result<Var> {
    let y = Rc::new(softmax_values(a.value(), axis)?);
    let (outer, len, inner) = axis_split(a.shape(), axis)?;
    let yc = (*y).clone();
    Ok(tape_of(a).push(yc, &[a], move |g, _| {
        let (gd, yd) = (g.data(), y.data());
        let mut dx = vec![0.0; gd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let dot: f64 = (0..len).map(|j| gd[at(j)] * yd[at(j)]).sum();
                for j in 0..len {
                    dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                }
            }
        }
        vec![Some(Tensor::new(y.shape(), dx).unwrap())]
    }))
}
