//! Binary channel and spatial gates.
//!
//! A gate head maps fused slot features to per-unit logits. At evaluation
//! time a unit is kept when `σ(logit) ≥ threshold`. During training each unit
//! draws a binary-concrete sample `y = σ((logit + g₁ − g₀)/τ)` with standard
//! Gumbel noise; the forward pass emits the hard decision `1[y ≥ threshold]`
//! while gradients flow through `y` (straight-through).

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, sigmoid_scalar};
use crate::rng::StreamRng;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Channel,
    Spatial,
}

impl MaskKind {
    pub fn tag(self) -> &'static str {
        match self {
            MaskKind::Channel => "c",
            MaskKind::Spatial => "s",
        }
    }
}

/// One mask for one sample. `density` is always recomputed from `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMask {
    pub kind: MaskKind,
    /// `[C]` for channel masks, `[Hg, Wg]` for spatial masks.
    pub values: Tensor,
    pub threshold: f64,
    pub hard: bool,
}

impl GateMask {
    pub fn new(kind: MaskKind, values: Tensor, threshold: f64, hard: bool) -> Result<Self> {
        let ok = match kind {
            MaskKind::Channel => values.rank() == 1,
            MaskKind::Spatial => values.rank() == 2,
        };
        if !ok {
            return Err(Error::dim(format!("{kind:?} mask with shape {:?}", values.shape())));
        }
        let in_range = if hard {
            values.data().iter().all(|&v| v == 0.0 || v == 1.0)
        } else {
            values.data().iter().all(|&v| (0.0..=1.0).contains(&v))
        };
        if !in_range {
            return Err(Error::invalid(format!(
                "{} mask values out of range",
                if hard { "hard" } else { "relaxed" }
            )));
        }
        Ok(Self {
            kind,
            values,
            threshold,
            hard,
        })
    }

    pub fn density(&self) -> f64 {
        self.values.mean()
    }
}

impl fmt::Display for GateMask {
    /// `kind density v v v ...` (mask dump line body).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            MaskKind::Channel => "channel",
            MaskKind::Spatial => "spatial",
        };
        write!(f, "{kind} {:.6}", self.density())?;
        for v in self.values.data() {
            write!(f, " {v}")?;
        }
        Ok(())
    }
}

/// Gate head weights: affine maps from flattened fused features `(S·d)` to
/// `C` channel logits and `Hg·Wg` spatial logits.
pub struct GateHeadParams<'a> {
    pub channel_w: &'a Var,
    pub channel_b: &'a Var,
    pub spatial_w: &'a Var,
    pub spatial_b: &'a Var,
}

/// Returns `(channel logits N×C, spatial logits N×Hg×Wg)`.
pub fn gate_logits(
    fused: &Var,
    head: &GateHeadParams<'_>,
    samples: usize,
    grid: [usize; 2],
) -> Result<(Var, Var)> {
    let rows = fused.shape()[0];
    let width = fused.value().len() / samples.max(1);
    if samples == 0 || rows % samples != 0 || head.channel_w.shape()[0] != width {
        return Err(Error::dim(format!(
            "fused features {:?} do not flatten to {samples} rows matching head input {:?}",
            fused.shape(),
            head.channel_w.shape()
        )));
    }
    let flat = ops::reshape(fused, &[samples, width])?;
    let channel = ops::linear(&flat, head.channel_w, head.channel_b)?;
    let spatial = ops::linear(&flat, head.spatial_w, head.spatial_b)?;
    if spatial.shape()[1] != grid[0] * grid[1] {
        return Err(Error::dim(format!(
            "spatial head width {} does not match grid {grid:?}",
            spatial.shape()[1]
        )));
    }
    let spatial = ops::reshape(&spatial, &[samples, grid[0], grid[1]])?;
    Ok((channel, spatial))
}

/// Hard mask `1[σ(logit) ≥ threshold]`.
pub fn binarize(logits: &Tensor, threshold: f64) -> Tensor {
    logits.map(|l| if sigmoid_scalar(l) >= threshold { 1.0 } else { 0.0 })
}

/// Standard Gumbel draw `−ln(−ln u)`, `u ∈ (0, 1)`.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Noise `g₁ − g₀` for a two-class relaxation, one entry per logit.
pub fn gumbel_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = gumbel(rng) - gumbel(rng);
    }
    t
}

/// Relaxed sample and its hard forward value for given noise.
pub struct GateSample {
    pub mask: Var,
    pub soft: Var,
    pub hard: Tensor,
}

/// Relaxed sample `σ((logits + noise) / τ)`.
fn relaxed(logits: &Var, noise: &Tensor, temperature: f64) -> Result<Var> {
    let noisy = ops::add(logits, &logits.tape().constant(noise.clone()))?;
    Ok(ops::sigmoid(&ops::scale(&noisy, 1.0 / temperature)))
}

/// Binary-concrete straight-through gate with explicit noise.
pub fn gumbel_gate(logits: &Var, noise: &Tensor, temperature: f64, threshold: f64) -> Result<GateSample> {
    if temperature <= 0.0 {
        return Err(Error::invalid(format!("temperature {temperature} must be > 0")));
    }
    let soft = relaxed(logits, noise, temperature)?;
    let margin = soft
        .value()
        .data()
        .iter()
        .map(|y| (y - threshold).abs())
        .fold(f64::INFINITY, f64::min);
    logits.tape().note_kink(margin);
    let hard = soft.value().map(|y| if y >= threshold { 1.0 } else { 0.0 });
    let mask = ops::straight_through(hard.clone(), &soft)?;
    Ok(GateSample { mask, soft, hard })
}

/// Upsamples a base-grid mask (last two axes) to `target` by nearest neighbour.
pub fn mask_for_stage(base: &Tensor, target: [usize; 2]) -> Result<Tensor> {
    let (fy, fx) = stage_factors(base.shape(), target)?;
    ops::nearest_upsample_tensor(base, fy, fx)
}

pub fn mask_for_stage_var(base: &Var, target: [usize; 2]) -> Result<Var> {
    let (fy, fx) = stage_factors(base.shape(), target)?;
    if fy == 1 && fx == 1 {
        return Ok(base.clone());
    }
    ops::nearest_upsample(base, fy, fx)
}

fn stage_factors(shape: &[usize], [h, w]: [usize; 2]) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(format!("mask shape {shape:?} has no grid axes")));
    }
    let (gh, gw) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h % gh != 0 || w % gw != 0 {
        return Err(Error::dim(format!(
            "stage {h}×{w} is not an integer multiple of mask grid {gh}×{gw}"
        )));
    }
    Ok((h / gh, w / gw))
}

/// How gate noise is produced for a forward pass.
#[derive(Clone)]
pub enum GateSampling {
    /// Deterministic thresholding, no gradient through masks.
    Eval,
    /// Fresh Gumbel noise from the stream.
    Train(StreamRng),
    /// Replays recorded noise in call order. With `pinned` offsets
    /// (`hard − soft` of a reference pass) the mask value becomes
    /// `soft + offset`, a smooth surrogate whose exact gradient is the
    /// straight-through gradient.
    Replay {
        noise: Vec<Tensor>,
        pinned: Option<Vec<Tensor>>,
    },
}

/// Record of one gate call.
#[derive(Clone, Debug)]
pub struct GateDraw {
    pub noise: Tensor,
    pub soft: Tensor,
    pub hard: Tensor,
}

pub struct GateSampler {
    sampling: GateSampling,
    temperature: f64,
    threshold: f64,
    cursor: usize,
    log: Vec<GateDraw>,
}

/// Mask output of a gate call: the value used in the forward pass and the
/// relaxed values whose mean drives the density penalty.
pub struct GateOutput {
    pub mask: Var,
    pub soft: Var,
    pub hard: Tensor,
}

impl GateSampler {
    pub fn new(sampling: GateSampling, temperature: f64, threshold: f64) -> Self {
        Self {
            sampling,
            temperature,
            threshold,
            cursor: 0,
            log: Vec::new(),
        }
    }

    pub fn eval(threshold: f64) -> Self {
        Self::new(GateSampling::Eval, DEFAULT_TEMPERATURE, threshold)
    }

    pub fn is_eval(&self) -> bool {
        matches!(self.sampling, GateSampling::Eval)
    }

    pub fn draws(&self) -> &[GateDraw] {
        &self.log
    }

    pub fn into_sampling(self) -> GateSampling {
        self.sampling
    }

    /// Noise and `hard − soft` offsets of the recorded draws, for a pinned replay.
    pub fn pinned_replay(&self) -> GateSampling {
        GateSampling::Replay {
            noise: self.log.iter().map(|d| d.noise.clone()).collect(),
            pinned: Some(
                self.log
                    .iter()
                    .map(|d| {
                        let off = d
                            .hard
                            .data()
                            .iter()
                            .zip(d.soft.data())
                            .map(|(h, s)| h - s)
                            .collect();
                        Tensor::new(d.hard.shape(), off).unwrap()
                    })
                    .collect(),
            ),
        }
    }

    pub fn gate(&mut self, logits: &Var) -> Result<GateOutput> {
        let tape = logits.tape().clone();
        let idx = self.cursor;
        self.cursor += 1;
        let noise = match &mut self.sampling {
            GateSampling::Eval => {
                let hard = binarize(logits.value(), self.threshold);
                let margin = logits
                    .value()
                    .data()
                    .iter()
                    .map(|&l| (sigmoid_scalar(l) - self.threshold).abs())
                    .fold(f64::INFINITY, f64::min);
                tape.note_kink(margin);
                return Ok(GateOutput {
                    mask: tape.constant(hard.clone()),
                    soft: ops::sigmoid(logits),
                    hard,
                });
            }
            GateSampling::Train(rng) => gumbel_noise(logits.shape(), rng),
            GateSampling::Replay { noise, .. } => noise
                .get(idx)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("replay has no noise for gate call {idx}")))?,
        };
        if noise.shape() != logits.shape() {
            return Err(Error::dim(format!(
                "replayed noise {:?} does not match logits {:?}",
                noise.shape(),
                logits.shape()
            )));
        }
        if let GateSampling::Replay {
            pinned: Some(offsets),
            ..
        } = &self.sampling
        {
            let off = offsets.get(idx).ok_or_else(|| {
                Error::invalid(format!("replay has no offset for gate call {idx}"))
            })?;
            if self.temperature <= 0.0 {
                return Err(Error::invalid(format!(
                    "temperature {} must be > 0",
                    self.temperature
                )));
            }
            let soft = relaxed(logits, &noise, self.temperature)?;
            let mask = ops::add(&soft, &tape.constant(off.clone()))?;
            let hard = mask.value().clone();
            self.log.push(GateDraw {
                noise,
                soft: soft.value().clone(),
                hard: hard.clone(),
            });
            return Ok(GateOutput { mask, soft, hard });
        }
        let sample = gumbel_gate(logits, &noise, self.temperature, self.threshold)?;
        self.log.push(GateDraw {
            noise,
            soft: sample.soft.value().clone(),
            hard: sample.hard.clone(),
        });
        Ok(GateOutput {
            mask: sample.mask,
            soft: sample.soft,
            hard: sample.hard,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tape::Tape;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn binarize_direct() {
        let l = Tensor::new(&[2], vec![logit(0.7), logit(0.3)]).unwrap();
        assert_eq!(binarize(&l, 0.5).data(), &[1.0, 0.0]);
    }

    #[test]
    fn binarize_equality_keeps_unit() {
        // σ(0) == 0.5 exactly
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(binarize(&Tensor::zeros(&[3]), 0.5).data(), &[1.0; 3]);
    }

    #[test]
    fn binarize_all_below() {
        let m = binarize(&Tensor::full(&[4], -3.0), 0.5);
        let mask = GateMask::new(MaskKind::Channel, m, 0.5, true).unwrap();
        assert_eq!(mask.density(), 0.0);
    }

    #[test]
    fn mask_invariants() {
        assert!(GateMask::new(MaskKind::Channel, Tensor::full(&[2], 0.5), 0.5, true).is_err());
        assert!(GateMask::new(MaskKind::Channel, Tensor::full(&[2], 0.5), 0.5, false).is_ok());
        assert!(GateMask::new(MaskKind::Spatial, Tensor::zeros(&[4]), 0.5, true).is_err());
    }

    #[test]
    fn gumbel_forward_is_binary() {
        let tape = Tape::new();
        let mut r = rng::stream(1, "t");
        let l = tape.leaf(Tensor::new(&[5], vec![-4.0, -0.5, 0.0, 0.5, 4.0]).unwrap());
        let noise = gumbel_noise(&[5], &mut r);
        let s = gumbel_gate(&l, &noise, 1.0, 0.5).unwrap();
        assert!(s.mask.value().data().iter().all(|&v| v == 0.0 || v == 1.0));
        // hard equals thresholded soft sample
        let want = s.soft.value().map(|y| if y >= 0.5 { 1.0 } else { 0.0 });
        assert!(s.mask.value().bitwise_eq(&want));
        assert!(gumbel_gate(&l, &noise, 0.0, 0.5).is_err());
    }

    #[test]
    fn stage_upsampling() {
        let base = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let up = mask_for_stage(&base, [4, 4]).unwrap();
        assert_eq!(up.mean(), 0.5);
        assert_eq!(mask_for_stage(&Tensor::ones(&[2, 2]), [8, 8]).unwrap(), Tensor::ones(&[8, 8]));
        assert!(matches!(mask_for_stage(&base, [5, 4]), Err(Error::Dimension(_))));
    }

    #[test]
    fn eval_sampler_is_deterministic() {
        let l = Tensor::new(&[1, 3], vec![0.2, -0.1, 3.0]).unwrap();
        let run = || {
            let tape = Tape::new();
            let mut s = GateSampler::eval(0.5);
            s.gate(&tape.leaf(l.clone())).unwrap().mask.value().clone()
        };
        assert!(run().bitwise_eq(&run()));
        assert_eq!(run().data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn replay_reproduces_train_draws() {
        let l = Tensor::new(&[2, 3], vec![0.2, -0.1, 3.0, 1.0, -2.0, 0.0]).unwrap();
        let tape = Tape::new();
        let lv = tape.leaf(l.clone());
        let mut s = GateSampler::new(GateSampling::Train(rng::stream(4, "g")), 1.0, 0.5);
        let a = s.gate(&lv).unwrap().mask.value().clone();
        let replay = GateSampling::Replay {
            noise: s.draws().iter().map(|d| d.noise.clone()).collect(),
            pinned: None,
        };
        let mut r = GateSampler::new(replay, 1.0, 0.5);
        let b = r.gate(&lv).unwrap().mask.value().clone();
        assert!(a.bitwise_eq(&b));
        let mut p = GateSampler::new(s.pinned_replay(), 1.0, 0.5);
        let c = p.gate(&lv).unwrap().mask.value().clone();
        assert!(c.max_abs_diff(&a) < 1e-15);
    }

    #[test]
    fn dump_line_format() {
        let m = GateMask::new(MaskKind::Channel, Tensor::new(&[2], vec![1.0, 0.0]).unwrap(), 0.5, true)
            .unwrap();
        assert_eq!(m.to_string(), "channel 0.500000 1 0");
    }
}
