//! Per-channel batch standardization with learned scale and shift.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Running mean/variance of one norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl NormStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Standardizes each channel of `x[N×C×H×W]`, then applies `scale` and `shift`.
///
/// In train mode returns the updated running statistics alongside the output
/// (momentum [`NORM_MOMENTUM`], unbiased variance); the caller decides when to
/// commit them.
pub fn channel_norm(
    x: &Var,
    scale: &Var,
    shift: &Var,
    stats: &NormStats,
    mode: NormMode,
) -> Result<(Var, Option<NormStats>)> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::dim(format!("channel_norm expects N×C×H×W, got {:?}", x.shape())));
    };
    if scale.shape() != [c] || shift.shape() != [c] || stats.mean.len() != c {
        return Err(Error::dim(format!(
            "channel_norm params sized for {:?}/{:?}/{} do not match {c} channels",
            scale.shape(),
            shift.shape(),
            stats.mean.len()
        )));
    }
    let hw = h * w;
    let count = n * hw;
    if mode == NormMode::Train && count == 1 {
        return Err(Error::DegenerateBatch(
            "N·H·W == 1 leaves no variance to estimate".into(),
        ));
    }
    let xd = x.value().data();
    let plane = |ni: usize, ci: usize| &xd[(ni * c + ci) * hw..][..hw];

    let (mean, var, updated) = match mode {
        NormMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let s: f64 = (0..n).map(|ni| plane(ni, ci).iter().sum::<f64>()).sum();
                let m = s / count as f64;
                let ss: f64 = (0..n)
                    .map(|ni| plane(ni, ci).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                    .sum();
                mean[ci] = m;
                var[ci] = ss / count as f64;
            }
            let unbias = count as f64 / (count as f64 - 1.0);
            let updated = NormStats {
                mean: stats
                    .mean
                    .iter()
                    .zip(&mean)
                    .map(|(r, b)| (1.0 - NORM_MOMENTUM) * r + NORM_MOMENTUM * b)
                    .collect(),
                var: stats
                    .var
                    .iter()
                    .zip(&var)
                    .map(|(r, b)| (1.0 - NORM_MOMENTUM) * r + NORM_MOMENTUM * b * unbias)
                    .collect(),
            };
            (mean, var, Some(updated))
        }
        NormMode::Eval => (stats.mean.clone(), stats.var.clone(), None),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let gamma = scale.shared_value();
    let beta = shift.shared_value();
    let mut xhat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            for p in 0..hw {
                let xh = (xd[off + p] - mean[ci]) * inv_std[ci];
                xhat[off + p] = xh;
                y[off + p] = gamma.data()[ci] * xh + beta.data()[ci];
            }
        }
    }
    let xhat = Rc::new(xhat);
    let value = Tensor::new(x.shape(), y)?;
    let out = x.tape().push(value, &[x, scale, shift], move |g, needs| {
        let gd = g.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for p in 0..hw {
                    dbeta[ci] += gd[off + p];
                    dgamma[ci] += gd[off + p] * xhat[off + p];
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; gd.len()];
            for ci in 0..c {
                let k = gamma.data()[ci] * inv_std[ci];
                let (mg, mgx) = match mode {
                    NormMode::Train => (dbeta[ci] / count as f64, dgamma[ci] / count as f64),
                    NormMode::Eval => (0.0, 0.0),
                };
                for ni in 0..n {
                    let off = (ni * c + ci) * hw;
                    for p in 0..hw {
                        dx[off + p] = k * (gd[off + p] - mg - xhat[off + p] * mgx);
                    }
                }
            }
            Tensor::new(&[n, c, h, w], dx).unwrap()
        });
        vec![
            dx,
            needs[1].then(|| Tensor::new(&[c], dgamma).unwrap()),
            needs[2].then(|| Tensor::new(&[c], dbeta).unwrap()),
        ]
    });
    Ok((out, updated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn unit(c: usize) -> (Tensor, Tensor) {
        (Tensor::ones(&[c]), Tensor::zeros(&[c]))
    }

    #[test]
    fn standardized_input_passes_through() {
        // channel values with mean 0 and biased variance 1
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let tape = Tape::new();
        let (g, b) = unit(1);
        let (y, _) = channel_norm(
            &tape.constant(x.clone()),
            &tape.constant(g),
            &tape.constant(b),
            &NormStats::new(1),
            NormMode::Train,
        )
        .unwrap();
        assert!(y.value().max_abs_diff(&x) < 1e-5);
        assert!(y.value().max_abs_diff(&x) > 0.0);
    }

    #[test]
    fn constant_channel_maps_to_shift() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 1, 2, 2], 3.3));
        let (y, _) = channel_norm(
            &x,
            &tape.constant(Tensor::ones(&[1])),
            &tape.constant(Tensor::full(&[1], 0.25)),
            &NormStats::new(1),
            NormMode::Train,
        )
        .unwrap();
        assert!(y.value().data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn single_cell_batch_is_degenerate() {
        let tape = Tape::new();
        let (g, b) = unit(2);
        let r = channel_norm(
            &tape.constant(Tensor::zeros(&[1, 2, 1, 1])),
            &tape.constant(g),
            &tape.constant(b),
            &NormStats::new(2),
            NormMode::Train,
        );
        assert!(matches!(r, Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn running_stats_momentum() {
        let tape = Tape::new();
        let x = Tensor::new(&[1, 1, 2, 1], vec![1.0, 3.0]).unwrap();
        let (g, b) = unit(1);
        let (_, upd) = channel_norm(
            &tape.constant(x),
            &tape.constant(g),
            &tape.constant(b),
            &NormStats::new(1),
            NormMode::Train,
        )
        .unwrap();
        let upd = upd.unwrap();
        assert!((upd.mean[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance 2.0
        assert!((upd.var[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn eval_uses_running_stats() {
        let tape = Tape::new();
        let stats = NormStats {
            mean: vec![1.0],
            var: vec![4.0 - NORM_EPS],
        };
        let (g, b) = unit(1);
        let (y, upd) = channel_norm(
            &tape.constant(Tensor::full(&[1, 1, 1, 1], 5.0)),
            &tape.constant(g),
            &tape.constant(b),
            &stats,
            NormMode::Eval,
        )
        .unwrap();
        assert!(upd.is_none());
        assert!((y.value().item() - 2.0).abs() < 1e-12);
    }
}
