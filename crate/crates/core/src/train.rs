//! SGD training, evaluation and per-epoch metrics.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::checkpoint::{Checkpoint, TrainState};
use crate::data::{DomainDataset, Manifest, Split};
use crate::error::{Error, Result};
use crate::gate::{GateSampler, GateSampling};
use crate::loss::{self, BoundSchedule};
use crate::net::{DynamicNet, ForwardOptions, GateOverride, LayerDensity, MacCount, NetworkConfig};
use crate::ops;
use crate::prompt::PromptBank;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPOCHS: usize = 70;
/// The reference recipe uses 256; 64 keeps desk-scale memory small.
pub const DEFAULT_BATCH: usize = 64;
pub const DEFAULT_LR: f64 = 0.001;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.0001;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_VAL_FRACTION: f64 = 0.2;
pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub schedule: BoundSchedule,
    pub seed: u64,
    /// Empty: taken from the manifest.
    pub source: String,
    /// Empty: taken from the manifest.
    pub targets: Vec<String>,
    /// Share of the source set held out for model selection when the
    /// manifest has no `val` entry.
    pub val_fraction: f64,
    /// Initial expected gate density; `None` uses `√T_d`.
    pub initial_density: Option<f64>,
    /// Forces every gate open (static-equivalence runs).
    pub clamp_gates_open: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH,
            learning_rate: DEFAULT_LR,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            momentum: DEFAULT_MOMENTUM,
            schedule: BoundSchedule::default(),
            seed: 0,
            source: String::new(),
            targets: Vec::new(),
            val_fraction: DEFAULT_VAL_FRACTION,
            initial_density: None,
            clamp_gates_open: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be ≥ 1"));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("weight decay must be ≥ 0 and momentum in [0, 1)"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid(format!("val fraction {} not in (0,1)", self.val_fraction)));
        }
        if !self.source.is_empty() && self.targets.contains(&self.source) {
            return Err(Error::invalid(format!(
                "source domain '{}' is also a target",
                self.source
            )));
        }
        if let Some(d) = self.initial_density {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::invalid(format!("initial density {d} not in (0,1)")));
            }
        }
        self.schedule.validate()
    }

    pub fn initial_density(&self) -> f64 {
        self.initial_density
            .unwrap_or_else(|| self.schedule.target_rate.sqrt())
    }
}

/// Momentum buffers plus the position used in divergence reports.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    buffers: Vec<Vec<f64>>,
    pub epoch: usize,
    pub step: usize,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// `g' = g + wd·w; buf = m·buf + g'; w ← w − lr·buf`.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    state: &mut SgdState,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim(format!(
            "{} parameters, {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::dim(format!(
                "parameter {i} shape {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Divergence {
                epoch: state.epoch,
                step: state.step,
                msg: format!("non-finite gradient for parameter {i}"),
            });
        }
    }
    if state.buffers.len() != params.len() {
        state.buffers = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut state.buffers) {
        for ((w, &gv), b) in p.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
            let g2 = gv + weight_decay * *w;
            *b = momentum * *b + g2;
            *w -= lr * *b;
        }
    }
    Ok(())
}

/// Source, validation and target datasets for one run.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: DomainDataset,
    pub val: DomainDataset,
    pub targets: Vec<DomainDataset>,
}

/// Splits off every `round(1/f)`-th group of `K` consecutive samples, which
/// keeps both parts class-balanced.
pub fn split_validation(ds: &DomainDataset, fraction: f64) -> Result<(DomainDataset, DomainDataset)> {
    let k = ds.classes;
    let groups = ds.len().div_ceil(k);
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for g in 0..groups {
        let to_val = ((g + 1) as f64 * fraction).floor() > (g as f64 * fraction).floor();
        let idx = (g * k..((g + 1) * k).min(ds.len())).collect::<Vec<_>>();
        if to_val { va.extend(idx) } else { tr.extend(idx) }
    }
    if tr.is_empty() || va.is_empty() {
        return Err(Error::invalid(format!(
            "{} samples too few to hold out a {fraction} validation share",
            ds.len()
        )));
    }
    Ok((ds.subset(&tr, Split::Train)?, ds.subset(&va, Split::Val)?))
}

impl TrainData {
    pub fn new(train: DomainDataset, val: DomainDataset, targets: Vec<DomainDataset>) -> Result<Self> {
        let d = Self { train, val, targets };
        for t in std::iter::once(&d.val).chain(&d.targets) {
            if t.classes != d.train.classes || t.geometry != d.train.geometry {
                return Err(Error::invalid(format!(
                    "dataset '{}' ({} classes, {:?}) disagrees with source ({} classes, {:?})",
                    t.domain, t.classes, t.geometry, d.train.classes, d.train.geometry
                )));
            }
        }
        if d.val.domain != d.train.domain {
            return Err(Error::invalid(format!(
                "validation domain '{}' differs from source '{}'",
                d.val.domain, d.train.domain
            )));
        }
        Ok(d)
    }

    pub fn from_manifest(manifest: &Manifest, val_fraction: f64) -> Result<Self> {
        let load_one = |role: Split| -> Result<Option<DomainDataset>> {
            let paths: Vec<_> = manifest.paths(role).collect();
            match paths.as_slice() {
                [] => Ok(None),
                [p] => Ok(Some(DomainDataset::load(p)?)),
                _ => Err(Error::invalid(format!("manifest lists {} {role} datasets, expected one", paths.len()))),
            }
        };
        let source = load_one(Split::Train)?
            .ok_or_else(|| Error::invalid("manifest has no train dataset"))?;
        let (train, val) = match load_one(Split::Val)? {
            Some(v) => (source, v),
            None => split_validation(&source, val_fraction)?,
        };
        let targets = manifest
            .paths(Split::Test)
            .map(DomainDataset::load)
            .collect::<Result<Vec<_>>>()?;
        Self::new(train, val, targets)
    }

    /// Checks the data against configured domain names, filling in empty ones.
    pub fn reconcile(&self, cfg: &mut TrainConfig, net: &NetworkConfig) -> Result<()> {
        if cfg.source.is_empty() {
            cfg.source = self.train.domain.clone();
        } else if cfg.source != self.train.domain {
            return Err(Error::invalid(format!(
                "configured source '{}' but manifest source is '{}'",
                cfg.source, self.train.domain
            )));
        }
        let names: Vec<String> = self.targets.iter().map(|t| t.domain.clone()).collect();
        if cfg.targets.is_empty() {
            cfg.targets = names;
        } else if cfg.targets != names {
            return Err(Error::invalid(format!(
                "configured targets {:?} but manifest targets are {names:?}",
                cfg.targets
            )));
        }
        if cfg.targets.contains(&cfg.source) {
            return Err(Error::invalid(format!("source '{}' is also a target", cfg.source)));
        }
        if self.train.classes != net.classes || self.train.geometry != net.input {
            return Err(Error::invalid(format!(
                "data has {} classes of {:?}, network expects {} of {:?}",
                self.train.classes, self.train.geometry, net.classes, net.input
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub domain: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// Hard densities averaged over samples; 1.0 for ungated networks.
    pub layers: Vec<LayerDensity>,
    pub macs: MacCount,
}

impl EvalReport {
    pub fn mac_ratio(&self) -> f64 {
        self.macs.ratio()
    }
}

/// Eval-mode accuracy and hard densities over fixed chunks of [`EVAL_BATCH`].
pub fn evaluate(net: &DynamicNet, ds: &DomainDataset, prompts: &PromptBank) -> Result<EvalReport> {
    evaluate_with(net, ds, prompts, &GateOverride::Learned)
}

fn evaluate_with(
    net: &DynamicNet,
    ds: &DomainDataset,
    prompts: &PromptBank,
    gates: &GateOverride,
) -> Result<EvalReport> {
    let cfg = net.config();
    if ds.classes != cfg.classes || ds.geometry != cfg.input {
        return Err(Error::invalid(format!(
            "dataset '{}' ({} classes, {:?}) does not fit the network ({} classes, {:?})",
            ds.domain, ds.classes, ds.geometry, cfg.classes, cfg.input
        )));
    }
    let prompt = prompts.resolve(&ds.domain)?;
    let names = cfg.block_names();
    let mut sums = vec![[0.0f64; 2]; names.len()];
    let mut macs = MacCount { dense: 0, gated: 0 };
    let mut correct = 0;
    let opts = ForwardOptions::eval().with_gates(gates.clone());
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = ds.batch(chunk)?;
        let mut sampler = GateSampler::eval(cfg.threshold);
        let out = net.infer(&x, &prompt, &mut sampler, &opts)?;
        correct += out
            .predictions()
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
        let stats = out.sparsity(cfg)?;
        for (s, l) in sums.iter_mut().zip(&stats.layers) {
            s[0] += l.channel * chunk.len() as f64;
            s[1] += l.spatial * chunk.len() as f64;
        }
        if stats.layers.is_empty() {
            for s in &mut sums {
                s[0] += chunk.len() as f64;
                s[1] += chunk.len() as f64;
            }
        }
        macs = macs + stats.macs;
    }
    let n = ds.len() as f64;
    Ok(EvalReport {
        domain: ds.domain.clone(),
        correct,
        total: ds.len(),
        accuracy: correct as f64 / n,
        layers: names
            .into_iter()
            .zip(sums)
            .map(|(name, [c, s])| LayerDensity {
                name,
                channel: c / n,
                spatial: s / n,
            })
            .collect(),
        macs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub p: f64,
    pub task_loss: f64,
    pub bound_low: f64,
    pub bound_up: f64,
    pub total_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    /// `(domain, accuracy)` in target order.
    pub target_accuracy: Vec<(String, f64)>,
    /// Source-validation hard densities.
    pub layers: Vec<LayerDensity>,
    pub mac_ratio: f64,
}

impl MetricsRow {
    pub fn unseen_accuracy(&self) -> f64 {
        if self.target_accuracy.is_empty() {
            return f64::NAN;
        }
        self.target_accuracy.iter().map(|(_, a)| a).sum::<f64>() / self.target_accuracy.len() as f64
    }

    pub fn header(&self) -> String {
        let mut cols: Vec<String> = [
            "epoch", "p", "task_loss", "bound_low", "bound_up", "total_loss", "train_acc", "val_acc",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        cols.extend(self.target_accuracy.iter().map(|(d, _)| format!("acc_{d}")));
        cols.push("unseen_acc".into());
        for l in &self.layers {
            cols.push(format!("{}.density_c", l.name));
            cols.push(format!("{}.density_s", l.name));
        }
        cols.push("mac_ratio".into());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.epoch.to_string();
        let mut put = |v: f64| write!(s, ",{v:.6}").unwrap();
        for v in [
            self.p,
            self.task_loss,
            self.bound_low,
            self.bound_up,
            self.total_loss,
            self.train_accuracy,
            self.val_accuracy,
        ] {
            put(v);
        }
        for (_, a) in &self.target_accuracy {
            put(*a);
        }
        put(self.unseen_accuracy());
        for l in &self.layers {
            put(l.channel);
            put(l.spatial);
        }
        put(self.mac_ratio);
        s
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::new();
    if let Some(r) = rows.first() {
        s.push_str(&r.header());
        s.push('\n');
    }
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    /// Best source-validation checkpoint (earliest on ties).
    pub best: Checkpoint,
    pub last: DynamicNet,
    /// Validation subset actually used for model selection.
    pub val: DomainDataset,
}

impl TrainOutcome {
    pub fn best_row(&self) -> &MetricsRow {
        &self.rows[self.best.state.epoch]
    }

    /// Writes `checkpoint.bin`, `metrics.csv` and `val.dyn` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.best.save(&dir.join("checkpoint.bin"))?;
        std::fs::write(dir.join("metrics.csv"), metrics_csv(&self.rows))?;
        self.val.save(&dir.join("val.dyn"))?;
        Ok(())
    }
}

struct StepStats {
    task: f64,
    low: f64,
    up: f64,
    total: f64,
    correct: usize,
}

fn train_step(
    net: &mut DynamicNet,
    cfg: &TrainConfig,
    schedule: &BoundSchedule,
    x: Tensor,
    labels: &[usize],
    prompt: &Tensor,
    sampler: &mut GateSampler,
    sgd: &mut SgdState,
) -> Result<StepStats> {
    let tape = Tape::new();
    let params = net.params().bind(&tape);
    let xv = tape.constant(x);
    let gates = if cfg.clamp_gates_open {
        GateOverride::AllOpen
    } else {
        GateOverride::Learned
    };
    let opts = ForwardOptions::train().with_gates(gates);
    let out = net.forward_on(&tape, &params, &xv, prompt, sampler, &opts)?;
    let task = ops::cross_entropy(&out.logits, labels)?;
    let (total, low, up) = if out.gates.is_empty() {
        (task.clone(), 0.0, 0.0)
    } else {
        let densities: Vec<Var> = out.gates.iter().flat_map(|g| g.soft_densities()).collect();
        let (low, up) = loss::bound_terms_var(&densities, schedule.p(), schedule.target_rate)?;
        let total = loss::total_loss_var(&task, &low, &up, schedule.loss_weight)?;
        (total, low.value().item(), up.value().item())
    };
    let total_v = total.value().item();
    if !total_v.is_finite() {
        return Err(Error::Divergence {
            epoch: sgd.epoch,
            step: sgd.step,
            msg: format!("loss is {total_v}"),
        });
    }
    let grads = tape.backward(&total)?;
    let grads: Vec<Tensor> = params.iter().map(|p| grads.get_or_zeros(p)).collect();
    let correct = out
        .predictions()
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    let updates = out.norm_updates;
    drop(params);
    sgd_step(
        net.params_mut().values_mut(),
        &grads,
        cfg.learning_rate,
        cfg.weight_decay,
        cfg.momentum,
        sgd,
    )?;
    net.apply_norm_updates(updates);
    Ok(StepStats {
        task: task.value().item(),
        low,
        up,
        total: total_v,
        correct,
    })
}

/// Trains a fresh network; `observer` sees each metrics row as it is produced.
pub fn train(
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    prompts: &PromptBank,
    observer: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.validate()?;
    data.reconcile(&mut cfg, net_cfg)?;
    let mut net = DynamicNet::new(net_cfg.clone(), cfg.seed, cfg.initial_density())?;
    let prompt = prompts.resolve(&cfg.source)?;
    let n = data.train.len();
    let mut sgd = SgdState::new();
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;
    let eval_gates = if cfg.clamp_gates_open {
        GateOverride::AllOpen
    } else {
        GateOverride::Learned
    };
    for epoch in 0..cfg.epochs {
        let schedule = cfg.schedule.at_epoch(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::indexed_stream(cfg.seed, "order", epoch as u64));
        let (mut task, mut low, mut up, mut total) = (0.0, 0.0, 0.0, 0.0);
        let mut correct = 0;
        sgd.epoch = epoch;
        for batch in order.chunks(cfg.batch_size) {
            let (x, labels) = data.train.batch(batch)?;
            let mut sampler = GateSampler::new(
                GateSampling::Train(rng::indexed_stream(cfg.seed, "gumbel", sgd.step as u64)),
                net_cfg.temperature,
                net_cfg.threshold,
            );
            let s = train_step(&mut net, &cfg, &schedule, x, &labels, &prompt, &mut sampler, &mut sgd)?;
            let w = batch.len() as f64;
            task += s.task * w;
            low += s.low * w;
            up += s.up * w;
            total += s.total * w;
            correct += s.correct;
            sgd.step += 1;
        }
        let val = evaluate_with(&net, &data.val, prompts, &eval_gates)?;
        let target_accuracy = data
            .targets
            .iter()
            .map(|t| Ok((t.domain.clone(), evaluate_with(&net, t, prompts, &eval_gates)?.accuracy)))
            .collect::<Result<Vec<_>>>()?;
        let nf = n as f64;
        let row = MetricsRow {
            epoch,
            p: schedule.p(),
            task_loss: task / nf,
            bound_low: low / nf,
            bound_up: up / nf,
            total_loss: total / nf,
            train_accuracy: correct as f64 / nf,
            val_accuracy: val.accuracy,
            target_accuracy,
            mac_ratio: val.mac_ratio(),
            layers: val.layers,
        };
        observer(&row);
        if best.as_ref().is_none_or(|b| row.val_accuracy > b.state.val_accuracy) {
            let state = TrainState {
                epoch,
                p: row.p,
                val_accuracy: row.val_accuracy,
                seed: cfg.seed,
            };
            best = Some(Checkpoint::new(&net, state, prompts));
        }
        rows.push(row);
    }
    Ok(TrainOutcome {
        rows,
        best: best.expect("at least one epoch"),
        last: net,
        val: data.val.clone(),
    })
}
