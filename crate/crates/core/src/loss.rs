//! Density bound loss with exponentially annealed bounds.
//!
//! Every mask density must lie in `[p·√T_d, 1 − p·(1 − √T_d)]` with
//! `p = exp(−α·epoch)`. At epoch 0 the interval is the single point `√T_d`;
//! it widens toward `[0, 1]` as `p → 0`. Violations are penalized by a
//! squared hinge summed over layers and mask kinds.

use crate::error::{Error, Result};
use crate::gate::GateMask;
use crate::ops;
use crate::tape::Var;

pub const DEFAULT_ANNEAL_RATE: f64 = 0.05;
pub const DEFAULT_TARGET_RATE: f64 = 0.5;
pub const DEFAULT_LOSS_WEIGHT: f64 = 1.0;

/// `p = exp(−α·epoch)` for a 0-based epoch.
pub fn anneal_p(epoch: i64, anneal_rate: f64) -> Result<f64> {
    if epoch < 0 {
        return Err(Error::invalid(format!("epoch {epoch} is negative")));
    }
    if anneal_rate <= 0.0 || !anneal_rate.is_finite() {
        return Err(Error::invalid(format!("anneal rate {anneal_rate} must be > 0")));
    }
    Ok((-anneal_rate * epoch as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundSchedule {
    pub target_rate: f64,
    pub anneal_rate: f64,
    pub loss_weight: f64,
    pub epoch: usize,
}

impl Default for BoundSchedule {
    fn default() -> Self {
        Self {
            target_rate: DEFAULT_TARGET_RATE,
            anneal_rate: DEFAULT_ANNEAL_RATE,
            loss_weight: DEFAULT_LOSS_WEIGHT,
            epoch: 0,
        }
    }
}

impl BoundSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_rate > 0.0 && self.target_rate < 1.0) {
            return Err(Error::invalid(format!("target rate {} not in (0,1)", self.target_rate)));
        }
        if self.anneal_rate <= 0.0 {
            return Err(Error::invalid(format!("anneal rate {} must be > 0", self.anneal_rate)));
        }
        if self.loss_weight < 0.0 || !self.loss_weight.is_finite() {
            return Err(Error::invalid(format!("bound loss weight {} must be ≥ 0", self.loss_weight)));
        }
        Ok(())
    }

    pub fn at_epoch(self, epoch: usize) -> Self {
        Self { epoch, ..self }
    }

    pub fn p(&self) -> f64 {
        (-self.anneal_rate * self.epoch as f64).exp()
    }

    /// `(lower, upper)` feasible density interval.
    pub fn bounds(&self) -> (f64, f64) {
        density_bounds(self.p(), self.target_rate)
    }
}

/// The upper bound `1 − p·(1 − √T_d)` is evaluated as `√T_d + (1 − p)·(1 − √T_d)`,
/// which is exactly `√T_d` at `p = 1`.
pub fn density_bounds(p: f64, target_rate: f64) -> (f64, f64) {
    let r = target_rate.sqrt();
    (p * r, r + (1.0 - p) * (1.0 - r))
}

fn check_density(d: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::invalid(format!("density {d} outside [0, 1]")));
    }
    Ok(())
}

/// `(L_low, L_up)` from mask densities at annealing factor `p`.
pub fn bound_terms(densities: &[f64], p: f64, target_rate: f64) -> Result<(f64, f64)> {
    if densities.is_empty() {
        return Err(Error::invalid("bound loss needs at least one mask"));
    }
    let (lower, upper) = density_bounds(p, target_rate);
    let mut low = 0.0;
    let mut up = 0.0;
    for &d in densities {
        check_density(d)?;
        let lo = (lower - d).max(0.0);
        let hi = (d - upper).max(0.0);
        low += lo * lo;
        up += hi * hi;
    }
    Ok((low, up))
}

/// `(L_low, L_up)` over every mask (all layers, both kinds).
pub fn bound_loss(masks: &[GateMask], schedule: &BoundSchedule) -> Result<(f64, f64)> {
    let d: Vec<f64> = masks.iter().map(GateMask::density).collect();
    bound_terms(&d, schedule.p(), schedule.target_rate)
}

/// Differentiable `(L_low, L_up)`; each density is a scalar var.
pub fn bound_terms_var(densities: &[Var], p: f64, target_rate: f64) -> Result<(Var, Var)> {
    let (first, rest) = densities
        .split_first()
        .ok_or_else(|| Error::invalid("bound loss needs at least one mask"))?;
    let (lower, upper) = density_bounds(p, target_rate);
    let term = |d: &Var| {
        let lo = ops::sq_hinge(&ops::add_scalar(&ops::scale(d, -1.0), lower));
        let hi = ops::sq_hinge(&ops::add_scalar(d, -upper));
        (lo, hi)
    };
    let (mut low, mut up) = term(first);
    for d in rest {
        let (lo, hi) = term(d);
        low = ops::add(&low, &lo)?;
        up = ops::add(&up, &hi)?;
    }
    Ok((low, up))
}

/// `L_task + λ_b·(L_low + L_up)`.
pub fn total_loss(task: f64, low: f64, up: f64, weight: f64) -> f64 {
    task + weight * (low + up)
}

pub fn total_loss_var(task: &Var, low: &Var, up: &Var, weight: f64) -> Result<Var> {
    ops::add(task, &ops::scale(&ops::add(low, up)?, weight))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anneal_values() {
        assert_eq!(anneal_p(0, 0.05).unwrap(), 1.0);
        assert!((anneal_p(20, 0.05).unwrap() - (-1f64).exp()).abs() < 1e-15);
        assert!((anneal_p(20, 0.05).unwrap() - 0.367879).abs() < 1e-6);
        assert!((anneal_p(70, 0.05).unwrap() - 0.030197).abs() < 1e-6);
        assert!(matches!(anneal_p(-1, 0.05), Err(Error::Validation(_))));
    }

    #[test]
    fn bound_examples() {
        assert_eq!(bound_terms(&[0.5], 1.0, 0.25).unwrap(), (0.0, 0.0));
        let (lo, up) = bound_terms(&[0.4], 1.0, 0.25).unwrap();
        assert!((lo - 0.01).abs() < 1e-15);
        assert_eq!(up, 0.0);
        for d in [0.0, 0.3, 1.0] {
            assert_eq!(bound_terms(&[d], 0.0, 0.25).unwrap(), (0.0, 0.0));
        }
        assert!(bound_terms(&[], 1.0, 0.25).is_err());
        assert!(bound_terms(&[1.5], 1.0, 0.25).is_err());
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(0.7, 0.2, 0.1, 0.0), 0.7);
        assert!((total_loss(1.0, 0.01, 0.0, 1.0) - 1.01).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn schedule_bounds_at_epoch_zero() {
        let s = BoundSchedule {
            target_rate: 0.25,
            ..Default::default()
        };
        assert_eq!(s.p(), 1.0);
        assert_eq!(s.bounds(), (0.5, 0.5));
    }
}
