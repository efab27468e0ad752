//! Gradient oracle battery.
//!
//! Every differentiable op and the full training loss are compared against
//! central finite differences over a range of seeds. Inputs are redrawn when
//! a pass lands too close to a relu or threshold kink, where finite
//! differences are meaningless.

use std::fmt;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gate::{self, GateHeadParams, GateSampler, GateSampling};
use crate::gradcheck::{gradcheck, GradcheckOptions, DEFAULT_STEP};
use crate::loss::{self, BoundSchedule};
use crate::net::{DynamicNet, ForwardOptions, NetworkConfig, Variant};
use crate::ops::{self, GruParams, NormMode, NormStats};
use crate::prompt::PromptBank;
use crate::rng::{self, StreamRng};
use crate::slot::{self, AttentionAxis, SlotConfig, TrunkParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_SEEDS: usize = 20;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Passes whose nearest kink is closer than this many steps are redrawn.
pub const KINK_STEPS: f64 = 10.0;
const MAX_REDRAWS: usize = 16;
/// Whole-network losses need a wider step to keep rounding noise below the
/// tolerance for entries with tiny gradients; Richardson extrapolation then
/// removes the larger truncation error.
pub const COMPOSITE_STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub seeds: usize,
    pub tolerance: f64,
    /// Replaces the matmul backward rule with a wrong one (negative control).
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: DEFAULT_SEEDS,
            tolerance: DEFAULT_TOLERANCE,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub seeds: usize,
    pub entries: usize,
    pub redraws: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for VerifyReport {
    /// One line per check; timing is left out so reports are reproducible.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<4} {:<28} max_rel_err={:.3e} seeds={} entries={}",
                if c.passed { "ok" } else { "FAIL" },
                c.name,
                c.max_rel_error,
                c.seeds,
                c.entries
            )?;
        }
        write!(
            f,
            "{} of {} checks within {:.0e}",
            self.checks.len() - self.failures().len(),
            self.checks.len(),
            self.tolerance
        )
    }
}

type Loss = Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>;

/// A scalar function, its inputs, an optional per-input entry budget and the
/// difference step.
struct Case {
    f: Loss,
    inputs: Vec<Tensor>,
    max_entries: Option<usize>,
    step: f64,
    richardson: bool,
}

impl Case {
    fn new(inputs: Vec<Tensor>, f: impl Fn(&Tape, &[Var]) -> Result<Var> + 'static) -> Self {
        Self {
            f: Box::new(f),
            inputs,
            max_entries: None,
            step: DEFAULT_STEP,
            richardson: false,
        }
    }
}

type Builder = fn(&mut StreamRng, bool) -> Result<Case>;

fn normal(r: &mut StreamRng, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let z: f64 = StandardNormal.sample(r);
        *v = z * std;
    }
    t
}

fn uniform(r: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = r.random_range(lo..hi);
    }
    t
}

/// `Σ y ⊙ w` for a fixed random `w`, so every output entry carries weight.
fn project(y: &Var, w: &Tensor) -> Result<Var> {
    Ok(ops::sum(&ops::mul(y, &y.tape().constant(w.clone()))?))
}

fn projected(
    r: &mut StreamRng,
    out_shape: &[usize],
    inputs: Vec<Tensor>,
    f: impl Fn(&Tape, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let w = normal(r, out_shape, 1.0);
    Case::new(inputs, move |t, v| project(&f(t, v)?, &w))
}

/// Matmul whose backward drops half of `dA`.
fn faulty_matmul(a: &Var, b: &Var) -> Result<Var> {
    let y = ops::matmul(a, b)?;
    let bt = b.value().clone();
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    Ok(a.tape().push(y.value().clone(), &[a, b], move |g, _| {
        let gd = g.data();
        let mut da = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                da[i * k + p] = 0.5 * (0..n).map(|j| gd[i * n + j] * bt.data()[p * n + j]).sum::<f64>();
            }
        }
        vec![Some(Tensor::new(&[m, k], da).unwrap()), None]
    }))
}

fn c_add(r: &mut StreamRng, _: bool) -> Result<Case> {
    let ins = vec![normal(r, &[3, 4], 1.0), normal(r, &[4], 1.0)];
    Ok(projected(r, &[3, 4], ins, |_, v| ops::add(&v[0], &v[1])))
}

fn c_sub(r: &mut StreamRng, _: bool) -> Result<Case> {
    let ins = vec![normal(r, &[2, 3, 2], 1.0), normal(r, &[3, 2], 1.0)];
    Ok(projected(r, &[2, 3, 2], ins, |_, v| ops::sub(&v[0], &v[1])))
}

fn c_mul(r: &mut StreamRng, _: bool) -> Result<Case> {
    let ins = vec![normal(r, &[3, 4], 1.0), normal(r, &[4], 1.0)];
    Ok(projected(r, &[3, 4], ins, |_, v| ops::mul(&v[0], &v[1])))
}

fn c_scale_shift(r: &mut StreamRng, _: bool) -> Result<Case> {
    let (s, c) = (r.random_range(-2.0..2.0), r.random_range(-1.0..1.0));
    let ins = vec![normal(r, &[5], 1.0)];
    Ok(projected(r, &[5], ins, move |_, v| {
        Ok(ops::add_scalar(&ops::scale(&v[0], s), c))
    }))
}

fn c_relu(r: &mut StreamRng, _: bool) -> Result<Case> {
    let ins = vec![normal(r, &[2, 5], 1.0)];
    Ok(projected(r, &[2, 5], ins, |_, v| Ok(ops::relu(&v[0]))))
}

fn c_sigmoid(r: &mut StreamRng, _: bool) -> Result<Case> {
    let ins = vec![normal(r, &[2, 5], 2.0)];
    Ok(projected(r, &[2, 5], ins, |_, v| Ok(ops::sigmoid(&v[0]))))
}

fn c_tanh(r: &mut StreamRng, _: bool) -> Result<Case> {
    let ins = vec![normal(r, &[2, 5], 1.5)];
    Ok(projected(r, &[2, 5], ins, |_, v| Ok(ops::tanh(&v[0]))))
}

fn c_sq_hinge(r: &mut StreamRng, _: bool) -> Result<Case> {
    let ins = vec![normal(r, &[6], 1.0)];
    Ok(projected(r, &[6], ins, |_, v| Ok(ops::sq_hinge(&v[0]))))
}

fn c_mean(r: &mut StreamRng, _: bool) -> Result<Case> {
    let ins = vec![normal(r, &[3, 3], 1.0)];
    Ok(Case::new(ins, |_, v| {
        let m = ops::mean(&v[0]);
        Ok(ops::mul(&m, &m)?)
    }))
}

fn c_reshape_transpose(r: &mut StreamRng, _: bool) -> Result<Case> {
    let ins = vec![normal(r, &[2, 6], 1.0)];
    Ok(projected(r, &[4, 3], ins, |_, v| {
        ops::transpose(&ops::reshape(&v[0], &[3, 4])?)
    }))
}

fn c_matmul(r: &mut StreamRng, fault: bool) -> Result<Case> {
    let ins = vec![normal(r, &[3, 4], 1.0), normal(r, &[4, 2], 1.0)];
    Ok(projected(r, &[3, 2], ins, move |_, v| {
        if fault {
            faulty_matmul(&v[0], &v[1])
        } else {
            ops::matmul(&v[0], &v[1])
        }
    }))
}

fn c_softmax(r: &mut StreamRng, _: bool) -> Result<Case> {
    let axis = r.random_range(0..3usize);
    let ins = vec![normal(r, &[2, 3, 4], 1.5)];
    Ok(projected(r, &[2, 3, 4], ins, move |_, v| ops::softmax(&v[0], axis)))
}

fn c_linear(r: &mut StreamRng, _: bool) -> Result<Case> {
    let ins = vec![normal(r, &[3, 5], 1.0), normal(r, &[5, 2], 0.5), normal(r, &[2], 0.5)];
    Ok(projected(r, &[3, 2], ins, |_, v| ops::linear(&v[0], &v[1], &v[2])))
}

fn c_cross_entropy(r: &mut StreamRng, _: bool) -> Result<Case> {
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
    let ins = vec![normal(r, &[4, 5], 2.0)];
    Ok(Case::new(ins, move |_, v| ops::cross_entropy(&v[0], &labels)))
}

fn c_straight_through(r: &mut StreamRng, _: bool) -> Result<Case> {
    let x = normal(r, &[6], 1.0);
    let soft0 = x.map(ops::sigmoid_scalar);
    let hard0 = gate::binarize(&x, 0.5);
    let off = Tensor::new(
        &[6],
        hard0.data().iter().zip(soft0.data()).map(|(h, s)| h - s).collect(),
    )?;
    // `soft + (hard₀ − soft₀)` is smooth and forwards `hard` at the probe point.
    Ok(projected(r, &[6], vec![x], move |t, v| {
        let s = ops::sigmoid(&v[0]);
        let pinned = ops::add(&s, &t.constant(off.clone()))?;
        ops::straight_through(pinned.value().clone(), &s)
    }))
}

fn gru_inputs(r: &mut StreamRng, rows: usize, d: usize) -> Vec<Tensor> {
    let mut v = vec![normal(r, &[rows, d], 1.0), normal(r, &[rows, d], 1.0)];
    for k in 0..9 {
        v.push(if k % 3 == 2 {
            normal(r, &[d], 0.3)
        } else {
            normal(r, &[d, d], 0.5)
        });
    }
    v
}

fn gru_params(v: &[Var]) -> GruParams<'_> {
    GruParams {
        w_update: &v[0],
        u_update: &v[1],
        b_update: &v[2],
        w_reset: &v[3],
        u_reset: &v[4],
        b_reset: &v[5],
        w_cand: &v[6],
        u_cand: &v[7],
        b_cand: &v[8],
    }
}

fn c_gru(r: &mut StreamRng, _: bool) -> Result<Case> {
    let ins = gru_inputs(r, 3, 4);
    Ok(projected(r, &[3, 4], ins, |_, v| ops::gru_cell(&v[0], &v[1], &gru_params(&v[2..]))))
}

fn c_norm_train(r: &mut StreamRng, _: bool) -> Result<Case> {
    let ins = vec![normal(r, &[2, 3, 2, 2], 1.0), normal(r, &[3], 1.0), normal(r, &[3], 1.0)];
    Ok(projected(r, &[2, 3, 2, 2], ins, |_, v| {
        let st = NormStats::new(3);
        Ok(ops::channel_norm(&v[0], &v[1], &v[2], &st, NormMode::Train)?.0)
    }))
}

fn c_norm_eval(r: &mut StreamRng, _: bool) -> Result<Case> {
    let st = NormStats {
        mean: normal(r, &[3], 1.0).into_data(),
        var: uniform(r, &[3], 0.5, 2.0).into_data(),
    };
    let ins = vec![normal(r, &[2, 3, 2, 2], 1.0), normal(r, &[3], 1.0), normal(r, &[3], 1.0)];
    Ok(projected(r, &[2, 3, 2, 2], ins, move |_, v| {
        Ok(ops::channel_norm(&v[0], &v[1], &v[2], &st, NormMode::Eval)?.0)
    }))
}

fn c_conv(r: &mut StreamRng, _: bool) -> Result<Case> {
    let ins = vec![normal(r, &[2, 2, 4, 4], 1.0), normal(r, &[3, 2, 3, 3], 0.5), normal(r, &[3], 0.5)];
    Ok(projected(r, &[2, 3, 4, 4], ins, |_, v| ops::conv2d(&v[0], &v[1], &v[2])))
}

fn c_pointwise(r: &mut StreamRng, _: bool) -> Result<Case> {
    let ins = vec![normal(r, &[2, 3, 2, 3], 1.0), normal(r, &[4, 3], 0.5)];
    Ok(projected(r, &[2, 4, 2, 3], ins, |_, v| ops::pointwise_conv(&v[0], &v[1])))
}

fn c_pools(r: &mut StreamRng, _: bool) -> Result<Case> {
    let ins = vec![normal(r, &[2, 2, 4, 4], 1.0)];
    let w1 = normal(r, &[2, 2, 2, 2], 1.0);
    let w2 = normal(r, &[2, 2], 1.0);
    Ok(Case::new(ins, move |_, v| {
        let a = project(&ops::avg_pool2(&v[0])?, &w1)?;
        let b = project(&ops::global_avg_pool(&v[0])?, &w2)?;
        ops::add(&a, &b)
    }))
}

fn c_masks(r: &mut StreamRng, _: bool) -> Result<Case> {
    let ins = vec![
        normal(r, &[2, 3, 4, 4], 1.0),
        uniform(r, &[2, 3], 0.0, 1.0),
        uniform(r, &[2, 2, 2], 0.0, 1.0),
    ];
    Ok(projected(r, &[2, 3, 4, 4], ins, |_, v| {
        let x = ops::mask_channels(&v[0], &v[1])?;
        let up = ops::nearest_upsample(&v[2], 2, 2)?;
        ops::mask_spatial(&x, &up)
    }))
}

fn slot_cfg(r: &mut StreamRng) -> SlotConfig {
    SlotConfig {
        slots: 3,
        dim: 4,
        iters: 2,
        axis: if r.random_bool(0.5) {
            AttentionAxis::Keys
        } else {
            AttentionAxis::Slots
        },
    }
}

fn c_slot_init(r: &mut StreamRng, _: bool) -> Result<Case> {
    let cfg = slot_cfg(r);
    let ins = vec![normal(r, &[4, 2, 2, 2], 1.0), normal(r, &[2, 12], 0.5), normal(r, &[12], 0.3)];
    Ok(projected(r, &[12, 4], ins, move |_, v| slot::init_slots(&v[0], &v[1], &v[2], &cfg)))
}

fn c_attention(r: &mut StreamRng, _: bool) -> Result<Case> {
    let cfg = slot_cfg(r);
    let ins = vec![
        normal(r, &[6, 4], 1.0),
        normal(r, &[5, 6], 1.0),
        normal(r, &[4, 4], 0.7),
        normal(r, &[6, 4], 0.7),
        normal(r, &[6, 4], 0.7),
    ];
    Ok(projected(r, &[6, 4], ins, move |_, v| {
        let a = slot::attention_scores(&v[0], &v[1], &v[2], &v[3], &cfg)?;
        slot::attend(&a, &v[1], &v[4])
    }))
}

fn c_slot_fusion(r: &mut StreamRng, _: bool) -> Result<Case> {
    let cfg = slot_cfg(r);
    let mut ins = vec![
        normal(r, &[2, 3, 2, 2], 1.0),
        normal(r, &[5, 6], 1.0),
        normal(r, &[3, 12], 0.5),
        normal(r, &[12], 0.3),
        normal(r, &[4, 4], 0.7),
        normal(r, &[6, 4], 0.7),
        normal(r, &[6, 4], 0.7),
    ];
    ins.extend(gru_inputs(r, 1, 4).into_iter().skip(2));
    Ok(projected(r, &[6, 4], ins, move |_, v| {
        let trunk = TrunkParams {
            query: &v[4],
            key: &v[5],
            value: &v[6],
            gru: gru_params(&v[7..]),
        };
        let fused = slot::fuse(&v[0], &v[1], &v[2], &v[3], &trunk, &cfg)?;
        let read = slot::attention_readout(&fused, &v[1], &trunk, &cfg)?;
        ops::add(&fused, &read)
    }))
}

fn c_gate(r: &mut StreamRng, _: bool) -> Result<Case> {
    let temperature = r.random_range(0.5..2.0);
    let noise_c = gate::gumbel_noise(&[2, 3], r);
    let noise_s = gate::gumbel_noise(&[2, 2, 2], r);
    let ins = vec![
        normal(r, &[4, 3], 1.0),
        normal(r, &[6, 3], 0.5),
        normal(r, &[3], 0.5),
        normal(r, &[6, 4], 0.5),
        normal(r, &[4], 0.5),
    ];
    let w = normal(r, &[2, 3], 1.0);
    Ok(Case::new(ins, move |_, v| {
        let head = GateHeadParams {
            channel_w: &v[1],
            channel_b: &v[2],
            spatial_w: &v[3],
            spatial_b: &v[4],
        };
        let (c, s) = gate::gate_logits(&v[0], &head, 2, [2, 2])?;
        let mut sampler = GateSampler::new(
            GateSampling::Replay {
                noise: vec![noise_c.clone(), noise_s.clone()],
                pinned: None,
            },
            temperature,
            0.5,
        );
        let gc = sampler.gate(&c)?;
        let gs = sampler.gate(&s)?;
        // Soft densities feed the bound loss; the masks themselves are
        // piecewise constant in value, so only their soft parts are probed.
        let a = project(&gc.soft, &w)?;
        let d = ops::add(&ops::mean(&gc.soft), &ops::mean(&gs.soft))?;
        ops::add(&a, &ops::mul(&d, &d)?)
    }))
}

fn c_bound_loss(r: &mut StreamRng, _: bool) -> Result<Case> {
    let epoch = r.random_range(0..40usize);
    let schedule = BoundSchedule {
        target_rate: r.random_range(0.05..0.95),
        loss_weight: r.random_range(0.1..2.0),
        ..Default::default()
    }
    .at_epoch(epoch);
    let ins = vec![uniform(r, &[6], 0.0, 1.0), normal(r, &[1], 1.0)];
    Ok(Case::new(ins, move |_, v| {
        let ds: Vec<Var> = (0..6)
            .map(|i| {
                let mut sel = Tensor::zeros(&[6]);
                sel.data_mut()[i] = 1.0;
                Ok(ops::sum(&ops::mul(&v[0], &v[0].tape().constant(sel))?))
            })
            .collect::<Result<_>>()?;
        let (low, up) = loss::bound_terms_var(&ds, schedule.p(), schedule.target_rate)?;
        let task = ops::sum(&ops::mul(&v[1], &v[1])?);
        loss::total_loss_var(&task, &low, &up, schedule.loss_weight)
    }))
}

fn tiny(variant: Variant) -> NetworkConfig {
    NetworkConfig {
        widths: vec![4, 6],
        input: [3, 4, 4],
        classes: 3,
        slot: SlotConfig {
            slots: 2,
            dim: 4,
            iters: 2,
            axis: AttentionAxis::Keys,
        },
        text_dim: 8,
        text_tokens: 3,
        base_grid: [2, 2],
        variant,
        ..Default::default()
    }
}

/// Full training objective (task + bound loss) with frozen Gumbel noise,
/// differentiated with respect to every parameter and the images.
fn composite(variant: Variant, r: &mut StreamRng) -> Result<Case> {
    let cfg = tiny(variant);
    let seed: u64 = r.random();
    let density = r.random_range(0.55..0.9);
    let net = DynamicNet::new(cfg.clone(), seed, density)?;
    let n = 2;
    let images = normal(r, &[n, 3, 4, 4], 1.0);
    let labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
    let prompt = PromptBank::hashed(cfg.text_dim, cfg.text_tokens, seed).resolve("photo")?;
    let schedule = BoundSchedule {
        target_rate: r.random_range(0.3..0.95),
        ..Default::default()
    }
    .at_epoch(r.random_range(0..10));

    let mut sampler = GateSampler::new(
        GateSampling::Train(rng::stream(seed, "verify:gumbel")),
        cfg.temperature,
        cfg.threshold,
    );
    net.infer(&images, &prompt, &mut sampler, &ForwardOptions::train())?;
    let replay = sampler.pinned_replay();

    // Conv biases feeding a batch norm have an identically zero gradient;
    // finite differences there only measure rounding noise.
    let names = net.params().names().to_vec();
    let frozen: Vec<bool> = names
        .iter()
        .map(|n| n.ends_with("conv1.bias") || n.ends_with("conv2.bias"))
        .collect();
    let fixed: Vec<Tensor> = net.params().values().to_vec();
    let mut inputs: Vec<Tensor> = fixed
        .iter()
        .zip(&frozen)
        .filter(|(_, &f)| !f)
        .map(|(t, _)| t.clone())
        .collect();
    inputs.push(images);

    let f = move |t: &Tape, v: &[Var]| -> Result<Var> {
        let mut it = v.iter();
        let params: Vec<Var> = fixed
            .iter()
            .zip(&frozen)
            .map(|(p, &f)| if f { t.constant(p.clone()) } else { it.next().unwrap().clone() })
            .collect();
        let x = it.next().unwrap();
        let mut s = GateSampler::new(replay.clone(), cfg.temperature, cfg.threshold);
        let out = net.forward_on(t, &params, x, &prompt, &mut s, &ForwardOptions::train())?;
        let task = ops::cross_entropy(&out.logits, &labels)?;
        if out.gates.is_empty() {
            return Ok(task);
        }
        let ds: Vec<Var> = out.gates.iter().flat_map(|g| g.soft_densities()).collect();
        let (low, up) = loss::bound_terms_var(&ds, schedule.p(), schedule.target_rate)?;
        loss::total_loss_var(&task, &low, &up, schedule.loss_weight)
    };
    Ok(Case {
        f: Box::new(f),
        inputs,
        max_entries: Some(6),
        step: COMPOSITE_STEP,
        richardson: true,
    })
}

fn c_net_base(r: &mut StreamRng, _: bool) -> Result<Case> {
    composite(Variant::Base, r)
}

fn c_net_dynamic(r: &mut StreamRng, _: bool) -> Result<Case> {
    composite(Variant::Dynamic, r)
}

fn c_net_normal(r: &mut StreamRng, _: bool) -> Result<Case> {
    composite(Variant::NormalAttention, r)
}

fn c_net_slot(r: &mut StreamRng, _: bool) -> Result<Case> {
    composite(Variant::SlotAttention, r)
}

const CHECKS: &[(&str, Builder)] = &[
    ("add", c_add),
    ("sub", c_sub),
    ("mul", c_mul),
    ("scale_shift", c_scale_shift),
    ("relu", c_relu),
    ("sigmoid", c_sigmoid),
    ("tanh", c_tanh),
    ("sq_hinge", c_sq_hinge),
    ("mean", c_mean),
    ("reshape_transpose", c_reshape_transpose),
    ("matmul", c_matmul),
    ("softmax", c_softmax),
    ("linear", c_linear),
    ("cross_entropy", c_cross_entropy),
    ("straight_through", c_straight_through),
    ("gru_cell", c_gru),
    ("channel_norm.train", c_norm_train),
    ("channel_norm.eval", c_norm_eval),
    ("conv2d", c_conv),
    ("pointwise_conv", c_pointwise),
    ("pooling", c_pools),
    ("masks_upsample", c_masks),
    ("slot_init", c_slot_init),
    ("attention", c_attention),
    ("slot_fusion", c_slot_fusion),
    ("gate_heads", c_gate),
    ("bound_loss", c_bound_loss),
    ("loss.base", c_net_base),
    ("loss.dynamic", c_net_dynamic),
    ("loss.normal_attention", c_net_normal),
    ("loss.slot_attention", c_net_slot),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

fn run_check(name: &'static str, build: Builder, opts: &VerifyOptions) -> Result<CheckResult> {
    let mut res = CheckResult {
        name,
        max_rel_error: 0.0,
        seeds: opts.seeds,
        entries: 0,
        redraws: 0,
        passed: true,
    };
    for s in 0..opts.seeds as u64 {
        let mut accepted = None;
        for attempt in 0..MAX_REDRAWS as u64 {
            let mut r = rng::indexed_stream(
                rng::derive_indexed(opts.seed, name, s),
                "verify:draw",
                attempt,
            );
            let case = build(&mut r, opts.inject_fault)?;
            let go = GradcheckOptions {
                max_entries: case.max_entries,
                seed: r.random(),
                step: case.step,
                richardson: case.richardson,
            };
            let rep = gradcheck(&case.f, &case.inputs, &go)?;
            if rep.kink_margin >= KINK_STEPS * case.step {
                accepted = Some(rep);
                break;
            }
            res.redraws += 1;
        }
        let rep = accepted.ok_or_else(|| {
            Error::Oracle(format!("{name}: every draw landed next to a kink"))
        })?;
        res.entries += rep.entries_checked;
        res.max_rel_error = res.max_rel_error.max(rep.max_rel_error);
    }
    res.passed = res.max_rel_error <= opts.tolerance;
    Ok(res)
}

/// Runs every check over `opts.seeds` seeds.
pub fn run(opts: &VerifyOptions) -> Result<VerifyReport> {
    let start = Instant::now();
    let checks = CHECKS
        .iter()
        .map(|&(name, build)| run_check(name, build, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport {
        checks,
        tolerance: opts.tolerance,
        elapsed: start.elapsed(),
    })
}
