//! Central finite-difference oracle for tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Check at most this many randomly chosen entries per input.
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Combine steps `h` and `h/2` as `(4·D(h/2) − D(h)) / 3`, cancelling the
    /// `O(h²)` truncation term.
    pub richardson: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_entries: None,
            seed: 0,
            richardson: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub entry: usize,
    pub tape: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub entries_checked: usize,
    /// Smallest distance to a relu/threshold kink seen in the unperturbed pass.
    pub kink_margin: f64,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.value().len() != 1 {
        return Err(Error::Oracle(format!(
            "function must be scalar, got shape {:?}",
            out.shape()
        )));
    }
    let v = out.value().item();
    if !v.is_finite() {
        return Err(Error::Oracle(format!("non-finite function value {v}")));
    }
    Ok(v)
}

/// Compares tape gradients of scalar `f` with central differences
/// `(f(x+h) − f(x−h)) / 2h`, entry by entry.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(Error::Oracle("non-finite input".into()));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if !out.value().is_finite() {
        return Err(Error::Oracle("non-finite function value".into()));
    }
    let grads = tape.backward(&out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::Oracle("non-finite tape gradient".into()));
    }
    let kink_margin = tape.kink_margin();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
        kink_margin,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => index::sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for j in entries {
            let x0 = input.data()[j];
            let mut central = |h: f64| -> Result<f64> {
                work[i].data_mut()[j] = x0 + h;
                let fp = eval_scalar(&f, &work)?;
                work[i].data_mut()[j] = x0 - h;
                let fm = eval_scalar(&f, &work)?;
                work[i].data_mut()[j] = x0;
                Ok((fp - fm) / (2.0 * h))
            };
            let numeric = if opts.richardson {
                let coarse = central(opts.step)?;
                (4.0 * central(opts.step / 2.0)? - coarse) / 3.0
            } else {
                central(opts.step)?
            };
            let a = analytic[i].data()[j];
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Mismatch {
                    input: i,
                    entry: j,
                    tape: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let f = |_: &Tape, v: &[Var]| Ok(ops::sum(&ops::mul(&v[0], &v[0])?));
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let g = tape.backward(&f(&tape, std::slice::from_ref(&xv)).unwrap()).unwrap();
        assert_eq!(g.get(&xv).unwrap().data(), &[2.0, 4.0]);
        let r = gradcheck(f, &[x], &GradcheckOptions::default()).unwrap();
        let w = r.worst.unwrap();
        assert!((w.numeric - w.tape).abs() < 1e-8);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn richardson_cancels_truncation() {
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        let f = |_: &Tape, v: &[Var]| Ok(ops::sum(&ops::mul(&ops::mul(&v[0], &v[0])?, &v[0])?));
        let mut o = GradcheckOptions {
            step: 1e-2,
            ..Default::default()
        };
        let plain = gradcheck(f, &[x.clone()], &o).unwrap();
        o.richardson = true;
        let rich = gradcheck(f, &[x], &o).unwrap();
        // Central error for x³ is h² exactly.
        assert!((plain.worst.unwrap().numeric - 3.0 - 1e-4).abs() < 1e-10);
        assert!(rich.max_rel_error < 1e-10);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let f = |t: &Tape, _: &[Var]| Ok(t.constant(Tensor::scalar(4.0)));
        let r = gradcheck(f, &[x], &GradcheckOptions::default()).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.worst.unwrap().numeric, 0.0);
    }

    #[test]
    fn non_finite_is_oracle_failure() {
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        let f = |_: &Tape, v: &[Var]| Ok(ops::sum(&ops::scale(&v[0], f64::INFINITY)));
        assert!(matches!(
            gradcheck(f, &[x], &GradcheckOptions::default()),
            Err(Error::Oracle(_))
        ));
    }

    #[test]
    fn detects_wrong_rule() {
        let x = Tensor::new(&[2], vec![0.5, 1.5]).unwrap();
        let f = |t: &Tape, v: &[Var]| {
            let y = t.push(v[0].value().map(|a| a * a), &[&v[0]], |g, _| {
                vec![Some(g.clone())] // missing factor 2x
            });
            Ok(ops::sum(&y))
        };
        let r = gradcheck(f, &[x], &GradcheckOptions::default()).unwrap();
        assert!(r.max_rel_error > 0.1);
    }
}
