use super::{add, add_scalar, matmul, mul, scale, sigmoid, softmax_values, tanh};
use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// `x[N×in] · weight[in×out] + bias[out]`.
pub fn linear(x: &Var, weight: &Var, bias: &Var) -> Result<Var> {
    add(&matmul(x, weight)?, bias)
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Var, labels: &[usize]) -> Result<Var> {
    let &[n, k] = logits.shape() else {
        return Err(Error::dim(format!("cross_entropy expects N×K logits, got {:?}", logits.shape())));
    };
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label: bad, classes: k });
    }
    let probs = softmax_values(logits.value(), 1)?;
    let ld = logits.value().data();
    let mut loss = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = &ld[i * k..][..k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[l];
    }
    loss /= n as f64;
    let labels = labels.to_vec();
    Ok(logits.tape().push(Tensor::scalar(loss), &[logits], move |g, _| {
        let s = g.item() / n as f64;
        let mut d: Vec<f64> = probs.data().iter().map(|p| p * s).collect();
        for (i, &l) in labels.iter().enumerate() {
            d[i * k + l] -= s;
        }
        vec![Some(Tensor::new(&[n, k], d).unwrap())]
    }))
}

/// Forward value `hard`, gradient passed unchanged to `soft`.
pub fn straight_through(hard: Tensor, soft: &Var) -> Result<Var> {
    if hard.shape() != soft.shape() {
        return Err(Error::dim(format!(
            "straight-through shapes differ: {:?} vs {:?}",
            hard.shape(),
            soft.shape()
        )));
    }
    Ok(soft.tape().push(hard, &[soft], |g, _| vec![Some(g.clone())]))
}

/// GRU weights; input and recurrent maps are `d×d`, biases length `d`.
pub struct GruParams<'a> {
    pub w_update: &'a Var,
    pub u_update: &'a Var,
    pub b_update: &'a Var,
    pub w_reset: &'a Var,
    pub u_reset: &'a Var,
    pub b_reset: &'a Var,
    pub w_cand: &'a Var,
    pub u_cand: &'a Var,
    pub b_cand: &'a Var,
}

/// One GRU step on row-stacked states:
///
/// ```text
/// z  = σ(x·Wz + h·Uz + bz)
/// r  = σ(x·Wr + h·Ur + br)
/// h̃  = tanh(x·Wh + (r⊙h)·Uh + bh)
/// h' = (1 − z)⊙h + z⊙h̃
/// ```
pub fn gru_cell(h: &Var, x: &Var, p: &GruParams<'_>) -> Result<Var> {
    if h.shape() != x.shape() || h.shape().len() != 2 {
        return Err(Error::dim(format!(
            "gru_cell state {:?} and input {:?} must be matching matrices",
            h.shape(),
            x.shape()
        )));
    }
    let z = sigmoid(&add(&add(&matmul(x, p.w_update)?, &matmul(h, p.u_update)?)?, p.b_update)?);
    let r = sigmoid(&add(&add(&matmul(x, p.w_reset)?, &matmul(h, p.u_reset)?)?, p.b_reset)?);
    let cand = tanh(&add(
        &add(&matmul(x, p.w_cand)?, &matmul(&mul(&r, h)?, p.u_cand)?)?,
        p.b_cand,
    )?);
    let keep = add_scalar(&scale(&z, -1.0), 1.0);
    add(&mul(&keep, h)?, &mul(&z, &cand)?)
}
