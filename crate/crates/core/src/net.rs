//! Prompt-conditioned dynamic residual classifier.
//!
//! Each residual block computes
//!
//! ```text
//! u  = relu(norm1(conv1(x)))      u' = u ⊙ channel_mask
//! v  = norm2(conv2(u'))           v' = v ⊙ upsample(spatial_mask)
//! y  = relu(v' + skip(x))
//! ```
//!
//! where the masks come from the block's gate head applied to features
//! fused from the block input and the scene prompt. Stages are separated by
//! 2×2 average pooling; a global pool and linear head produce the logits.
//! The skip path is never gated.

use std::fmt;

use crate::error::{Error, Result};
use crate::gate::{self, GateHeadParams, GateMask, GateOutput, GateSampler, MaskKind};
use crate::ops::{self, GruParams, NormMode, NormStats};
use crate::params::{he_normal, ParamStore};
use crate::prompt::{DEFAULT_TEXT_DIM, DEFAULT_TOKENS};
use crate::slot::{self, AttentionAxis, SlotConfig, TrunkParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Static network, no gates.
    Base,
    /// Gates driven by visual features only (no prompt, no attention).
    Dynamic,
    /// One cross-attention readout over the prompt, no recurrence.
    NormalAttention,
    /// GRU-refined slot attention over the prompt.
    SlotAttention,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Base,
        Variant::Dynamic,
        Variant::NormalAttention,
        Variant::SlotAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Dynamic => "dynamic",
            Variant::NormalAttention => "normal",
            Variant::SlotAttention => "slot",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "dynamic" => Ok(Variant::Dynamic),
            "normal" | "normal-attention" => Ok(Variant::NormalAttention),
            "slot" | "slot-attention" => Ok(Variant::SlotAttention),
            _ => Err(Error::invalid(format!(
                "unknown variant '{s}' (expected base|dynamic|normal|slot)"
            ))),
        }
    }

    pub fn is_gated(self) -> bool {
        self != Variant::Base
    }

    fn uses_prompt(self) -> bool {
        matches!(self, Variant::NormalAttention | Variant::SlotAttention)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Channels, height, width.
    pub input: [usize; 3],
    pub classes: usize,
    pub slot: SlotConfig,
    pub text_dim: usize,
    pub text_tokens: usize,
    pub threshold: f64,
    pub temperature: f64,
    pub base_grid: [usize; 2],
    pub variant: Variant,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            blocks_per_stage: 1,
            input: [3, 32, 32],
            classes: 4,
            slot: SlotConfig::default(),
            text_dim: DEFAULT_TEXT_DIM,
            text_tokens: DEFAULT_TOKENS,
            threshold: gate::DEFAULT_THRESHOLD,
            temperature: gate::DEFAULT_TEMPERATURE,
            base_grid: [8, 8],
            variant: Variant::SlotAttention,
        }
    }
}

/// Static shape facts about one residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGeometry {
    pub stage: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    /// Spatial gate grid: the base grid, capped at the block's own size.
    pub grid: [usize; 2],
}

impl BlockGeometry {
    pub fn has_projection(&self) -> bool {
        self.in_ch != self.out_ch
    }

    pub fn cells(&self) -> u64 {
        (self.height * self.width) as u64
    }

    pub fn conv1_macs(&self) -> u64 {
        (self.in_ch * self.out_ch * 9) as u64 * self.cells()
    }

    pub fn conv2_macs(&self) -> u64 {
        (self.out_ch * self.out_ch * 9) as u64 * self.cells()
    }

    pub fn skip_macs(&self) -> u64 {
        if self.has_projection() {
            (self.in_ch * self.out_ch) as u64 * self.cells()
        } else {
            0
        }
    }

    /// Upsampled block cells per spatial-grid cell.
    pub fn cells_per_grid_cell(&self) -> u64 {
        self.cells() / (self.grid[0] * self.grid[1]) as u64
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse '{value}'")))
}

fn parse_dims<const K: usize>(key: &str, value: &str) -> Result<[usize; K]> {
    let v: Vec<usize> = value
        .split('x')
        .map(|p| parse_num(key, p))
        .collect::<Result<_>>()?;
    v.try_into()
        .map_err(|_| Error::invalid(format!("{key}: expected {K} extents separated by 'x'")))
}

impl NetworkConfig {
    pub const KEYS: [&'static str; 14] = [
        "variant",
        "widths",
        "blocks_per_stage",
        "input",
        "classes",
        "slots",
        "slot_dim",
        "slot_iters",
        "attention_axis",
        "text_dim",
        "text_tokens",
        "threshold",
        "temperature",
        "grid",
    ];

    /// `key = value` pairs; floats use the shortest exact representation.
    pub fn to_entries(&self) -> Vec<(&'static str, String)> {
        let join = |v: &[usize], sep: &str| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep);
        let values = [
            self.variant.name().to_string(),
            join(&self.widths, ","),
            self.blocks_per_stage.to_string(),
            join(&self.input, "x"),
            self.classes.to_string(),
            self.slot.slots.to_string(),
            self.slot.dim.to_string(),
            self.slot.iters.to_string(),
            self.slot.axis.name().to_string(),
            self.text_dim.to_string(),
            self.text_tokens.to_string(),
            format!("{:?}", self.threshold),
            format!("{:?}", self.temperature),
            join(&self.base_grid, "x"),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "variant" => self.variant = Variant::parse(value)?,
            "widths" => {
                self.widths = value
                    .split(',')
                    .map(|p| parse_num(key, p))
                    .collect::<Result<_>>()?
            }
            "blocks_per_stage" => self.blocks_per_stage = parse_num(key, value)?,
            "input" => self.input = parse_dims(key, value)?,
            "classes" => self.classes = parse_num(key, value)?,
            "slots" => self.slot.slots = parse_num(key, value)?,
            "slot_dim" => self.slot.dim = parse_num(key, value)?,
            "slot_iters" => self.slot.iters = parse_num(key, value)?,
            "attention_axis" => self.slot.axis = AttentionAxis::parse(value)?,
            "text_dim" => self.text_dim = parse_num(key, value)?,
            "text_tokens" => self.text_tokens = parse_num(key, value)?,
            "threshold" => self.threshold = parse_num(key, value)?,
            "temperature" => self.temperature = parse_num(key, value)?,
            "grid" => self.base_grid = parse_dims(key, value)?,
            _ => return Err(Error::invalid(format!("unknown network key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("stage widths must be positive and nonempty"));
        }
        if self.widths.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("stage widths must be nondecreasing"));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::invalid("blocks per stage must be ≥ 1"));
        }
        if self.classes < 2 {
            return Err(Error::invalid(format!("class count {} < 2", self.classes)));
        }
        let [c, h, w] = self.input;
        if c == 0 {
            return Err(Error::invalid("input channels must be ≥ 1"));
        }
        let down = 1usize << (self.widths.len() - 1);
        if h % down != 0 || w % down != 0 || h / down == 0 || w / down == 0 {
            return Err(Error::invalid(format!(
                "input {h}×{w} cannot be halved {} times",
                self.widths.len() - 1
            )));
        }
        if self.slot.slots == 0 || self.slot.dim == 0 {
            return Err(Error::invalid("slot count and dimension must be ≥ 1"));
        }
        if self.variant == Variant::SlotAttention && self.slot.iters == 0 {
            return Err(Error::invalid("slot attention needs ≥ 1 iteration"));
        }
        if self.text_dim < crate::prompt::MIN_TEXT_DIM || self.text_tokens == 0 {
            return Err(Error::invalid("prompt dimension ≥ 8 and ≥ 1 token required"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!("threshold {} not in (0,1)", self.threshold)));
        }
        if self.temperature <= 0.0 {
            return Err(Error::invalid(format!("temperature {} must be > 0", self.temperature)));
        }
        if self.base_grid[0] == 0 || self.base_grid[1] == 0 {
            return Err(Error::invalid("base grid must be positive"));
        }
        for g in self.blocks() {
            if g.height % g.grid[0] != 0 || g.width % g.grid[1] != 0 {
                return Err(Error::invalid(format!(
                    "stage {} size {}×{} is not a multiple of gate grid {:?}",
                    g.stage, g.height, g.width, g.grid
                )));
            }
        }
        Ok(())
    }

    pub fn blocks(&self) -> Vec<BlockGeometry> {
        let [c0, h0, w0] = self.input;
        let mut out = Vec::new();
        let mut in_ch = c0;
        for (s, &width) in self.widths.iter().enumerate() {
            let (h, w) = (h0 >> s, w0 >> s);
            for _ in 0..self.blocks_per_stage {
                out.push(BlockGeometry {
                    stage: s,
                    in_ch,
                    out_ch: width,
                    height: h,
                    width: w,
                    grid: [self.base_grid[0].min(h), self.base_grid[1].min(w)],
                });
                in_ch = width;
            }
        }
        out
    }

    pub fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for s in 0..self.widths.len() {
            for b in 0..self.blocks_per_stage {
                names.push(format!("stage{s}.block{b}"));
            }
        }
        names
    }

    pub fn head_macs(&self) -> u64 {
        (self.widths[self.widths.len() - 1] * self.classes) as u64
    }

    /// Backbone MACs per sample with every gate open.
    pub fn dense_macs(&self) -> u64 {
        self.blocks()
            .iter()
            .map(|g| g.conv1_macs() + g.conv2_macs() + g.skip_macs())
            .sum::<u64>()
            + self.head_macs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacCount {
    pub dense: u64,
    pub gated: u64,
}

impl MacCount {
    pub fn ratio(&self) -> f64 {
        self.gated as f64 / self.dense as f64
    }
}

impl std::ops::Add for MacCount {
    type Output = MacCount;
    fn add(self, o: MacCount) -> MacCount {
        MacCount {
            dense: self.dense + o.dense,
            gated: self.gated + o.gated,
        }
    }
}

/// Backbone multiply-accumulates for one sample.
///
/// `masks` is either empty (static network) or holds, per block, the hard
/// channel mask followed by the hard spatial mask on the block's grid.
/// conv1 scales with the active spatial cells; conv2 with active channels
/// times active cells. Skip projections and the head are never gated.
pub fn count_macs(config: &NetworkConfig, masks: &[GateMask]) -> Result<MacCount> {
    let blocks = config.blocks();
    let dense = config.dense_macs();
    if masks.is_empty() {
        return Ok(MacCount { dense, gated: dense });
    }
    if masks.len() != 2 * blocks.len() {
        return Err(Error::dim(format!(
            "{} masks for {} blocks (expected 2 per block)",
            masks.len(),
            blocks.len()
        )));
    }
    let mut gated = config.head_macs();
    for (g, pair) in blocks.iter().zip(masks.chunks_exact(2)) {
        let (c, s) = (&pair[0], &pair[1]);
        if c.kind != MaskKind::Channel || c.values.shape() != [g.out_ch] {
            return Err(Error::dim(format!(
                "channel mask {:?} inconsistent with {} channels",
                c.values.shape(),
                g.out_ch
            )));
        }
        if s.kind != MaskKind::Spatial || s.values.shape() != g.grid {
            return Err(Error::dim(format!(
                "spatial mask {:?} inconsistent with grid {:?}",
                s.values.shape(),
                g.grid
            )));
        }
        let active = |m: &GateMask| m.values.data().iter().filter(|&&v| v != 0.0).count() as u64;
        let cells = active(s) * g.cells_per_grid_cell();
        let channels = active(c);
        gated += (g.in_ch * g.out_ch * 9) as u64 * cells;
        gated += channels * (g.out_ch * 9) as u64 * cells;
        gated += g.skip_macs();
    }
    Ok(MacCount { dense, gated })
}

struct GateIds {
    init_w: usize,
    init_b: usize,
    channel_w: usize,
    channel_b: usize,
    spatial_w: usize,
    spatial_b: usize,
}

struct BlockIds {
    conv1_w: usize,
    conv1_b: usize,
    norm1_scale: usize,
    norm1_shift: usize,
    norm1_stats: usize,
    conv2_w: usize,
    conv2_b: usize,
    norm2_scale: usize,
    norm2_shift: usize,
    norm2_stats: usize,
    skip: Option<usize>,
    gate: Option<GateIds>,
}

struct TrunkIds {
    query: usize,
    key: usize,
    value: usize,
    gru: [usize; 9],
}

const GRU_NAMES: [&str; 9] = [
    "w_update", "u_update", "b_update", "w_reset", "u_reset", "b_reset", "w_cand", "u_cand",
    "b_cand",
];

/// Gate behaviour override for a forward pass.
#[derive(Debug, Clone, Default)]
pub enum GateOverride {
    #[default]
    Learned,
    /// Every mask entry is 1.
    AllOpen,
    /// Per-block masks: channel `[N×C]`, spatial `[N×Hg×Wg]` on the block grid.
    Fixed(Vec<(Tensor, Tensor)>),
}

/// Adds `delta` to channel `channel` of block `block`'s post-conv1 activations.
#[derive(Debug, Clone, Copy)]
pub struct ChannelProbe {
    pub block: usize,
    pub channel: usize,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub norm: NormMode,
    pub gates: GateOverride,
    pub probe: Option<ChannelProbe>,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            norm: NormMode::Train,
            gates: GateOverride::Learned,
            probe: None,
        }
    }

    pub fn eval() -> Self {
        Self {
            norm: NormMode::Eval,
            gates: GateOverride::Learned,
            probe: None,
        }
    }

    pub fn with_gates(mut self, gates: GateOverride) -> Self {
        self.gates = gates;
        self
    }
}

/// Masks produced by one block for the whole batch.
pub struct BlockGates {
    pub channel: GateOutput,
    /// On the block's gate grid, `[N×Hg×Wg]`.
    pub spatial: GateOutput,
}

impl BlockGates {
    /// Mean relaxed densities (differentiable) for the bound loss.
    pub fn soft_densities(&self) -> [Var; 2] {
        [ops::mean(&self.channel.soft), ops::mean(&self.spatial.soft)]
    }

    pub fn hard_densities(&self) -> [f64; 2] {
        [self.channel.hard.mean(), self.spatial.hard.mean()]
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Empty for the static variant.
    pub gates: Vec<BlockGates>,
    pub norm_updates: Vec<(usize, NormStats)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDensity {
    pub name: String,
    pub channel: f64,
    pub spatial: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityStats {
    pub layers: Vec<LayerDensity>,
    pub macs: MacCount,
}

impl ForwardOutput {
    /// Hard masks of sample `i`: channel then spatial per block.
    pub fn sample_masks(&self, i: usize, threshold: f64) -> Result<Vec<GateMask>> {
        let mut out = Vec::with_capacity(2 * self.gates.len());
        for g in &self.gates {
            let c = &g.channel.hard;
            let s = &g.spatial.hard;
            let cw = c.shape()[1];
            let [_, gh, gw] = s.shape() else { unreachable!() };
            out.push(GateMask::new(
                MaskKind::Channel,
                Tensor::new(&[cw], c.data()[i * cw..][..cw].to_vec())?,
                threshold,
                true,
            )?);
            out.push(GateMask::new(
                MaskKind::Spatial,
                Tensor::new(&[*gh, *gw], s.data()[i * gh * gw..][..gh * gw].to_vec())?,
                threshold,
                true,
            )?);
        }
        Ok(out)
    }

    pub fn batch_size(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn sparsity(&self, config: &NetworkConfig) -> Result<SparsityStats> {
        let names = config.block_names();
        let layers = self
            .gates
            .iter()
            .zip(&names)
            .map(|(g, name)| {
                let [c, s] = g.hard_densities();
                LayerDensity {
                    name: name.clone(),
                    channel: c,
                    spatial: s,
                }
            })
            .collect();
        let mut macs = MacCount { dense: 0, gated: 0 };
        for i in 0..self.batch_size() {
            macs = macs + count_macs(config, &self.sample_masks(i, config.threshold)?)?;
        }
        Ok(SparsityStats { layers, macs })
    }

    pub fn predictions(&self) -> Vec<usize> {
        let &[n, k] = self.logits.shape() else { unreachable!() };
        let d = self.logits.value().data();
        (0..n)
            .map(|i| {
                let row = &d[i * k..][..k];
                (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect()
    }
}

/// Dynamic network: configuration, parameters and their layout.
pub struct DynamicNet {
    config: NetworkConfig,
    params: ParamStore,
    blocks: Vec<BlockIds>,
    trunk: Option<TrunkIds>,
    head_w: usize,
    head_b: usize,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl DynamicNet {
    /// Fresh network. Every parameter draws from a stream named after it,
    /// so the backbone initializes identically across variants. Gate-head
    /// biases start at `logit(initial_density)`.
    pub fn new(config: NetworkConfig, seed: u64, initial_density: f64) -> Result<Self> {
        config.validate()?;
        if !(initial_density > 0.0 && initial_density < 1.0) {
            return Err(Error::invalid(format!(
                "initial gate density {initial_density} not in (0,1)"
            )));
        }
        let mut p = ParamStore::new();
        let gated = config.variant.is_gated();
        let sd = config.slot.slots * config.slot.dim;
        let gate_bias = logit(initial_density);
        let mut blocks = Vec::new();
        for (g, name) in config.blocks().iter().zip(config.block_names()) {
            let (ci, co) = (g.in_ch, g.out_ch);
            let w = |p: &mut ParamStore, suffix: &str, shape: &[usize], fan_in: usize| {
                let n = format!("{name}.{suffix}");
                p.add(&n, he_normal(shape, fan_in, seed, &n))
            };
            let conv1_w = w(&mut p, "conv1.weight", &[co, ci, 3, 3], ci * 9);
            let conv1_b = p.add(&format!("{name}.conv1.bias"), Tensor::zeros(&[co]));
            let norm1_scale = p.add(&format!("{name}.norm1.scale"), Tensor::ones(&[co]));
            let norm1_shift = p.add(&format!("{name}.norm1.shift"), Tensor::zeros(&[co]));
            let conv2_w = w(&mut p, "conv2.weight", &[co, co, 3, 3], co * 9);
            let conv2_b = p.add(&format!("{name}.conv2.bias"), Tensor::zeros(&[co]));
            let norm2_scale = p.add(&format!("{name}.norm2.scale"), Tensor::ones(&[co]));
            let norm2_shift = p.add(&format!("{name}.norm2.shift"), Tensor::zeros(&[co]));
            let skip = g
                .has_projection()
                .then(|| w(&mut p, "skip.weight", &[co, ci], ci));
            let gate = gated.then(|| {
                let cells = g.grid[0] * g.grid[1];
                GateIds {
                    init_w: w(&mut p, "gate.init.weight", &[ci, sd], ci),
                    init_b: p.add(&format!("{name}.gate.init.bias"), Tensor::zeros(&[sd])),
                    channel_w: w(&mut p, "gate.channel.weight", &[sd, co], sd),
                    channel_b: p.add(&format!("{name}.gate.channel.bias"), Tensor::full(&[co], gate_bias)),
                    spatial_w: w(&mut p, "gate.spatial.weight", &[sd, cells], sd),
                    spatial_b: p.add(&format!("{name}.gate.spatial.bias"), Tensor::full(&[cells], gate_bias)),
                }
            });
            let norm1_stats = p.add_norm(&format!("{name}.norm1"), co);
            let norm2_stats = p.add_norm(&format!("{name}.norm2"), co);
            blocks.push(BlockIds {
                conv1_w,
                conv1_b,
                norm1_scale,
                norm1_shift,
                norm1_stats,
                conv2_w,
                conv2_b,
                norm2_scale,
                norm2_shift,
                norm2_stats,
                skip,
                gate,
            });
        }
        let trunk = config.variant.uses_prompt().then(|| {
            let d = config.slot.dim;
            let dt = config.text_dim;
            let w = |p: &mut ParamStore, n: &str, shape: &[usize], fan_in: usize| {
                let n = format!("trunk.{n}");
                p.add(&n, he_normal(shape, fan_in, seed, &n))
            };
            let query = w(&mut p, "query", &[d, d], d);
            let key = w(&mut p, "key", &[dt, d], dt);
            let value = w(&mut p, "value", &[dt, d], dt);
            let mut gru = [0; 9];
            for (i, n) in GRU_NAMES.iter().enumerate() {
                gru[i] = if n.starts_with("b_") {
                    p.add(&format!("trunk.gru.{n}"), Tensor::zeros(&[d]))
                } else {
                    // Glorot-like scale keeps sigmoid/tanh out of saturation.
                    let mut t = he_normal(&[d, d], d, seed, &format!("trunk.gru.{n}"));
                    t.data_mut().iter_mut().for_each(|v| *v *= 0.5f64.sqrt());
                    p.add(&format!("trunk.gru.{n}"), t)
                };
            }
            TrunkIds {
                query,
                key,
                value,
                gru,
            }
        });
        let last = *config.widths.last().unwrap();
        let head_w = p.add("head.weight", he_normal(&[last, config.classes], last, seed, "head.weight"));
        let head_b = p.add("head.bias", Tensor::zeros(&[config.classes]));
        Ok(Self {
            config,
            params: p,
            blocks,
            trunk,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn apply_norm_updates(&mut self, updates: Vec<(usize, NormStats)>) {
        for (id, s) in updates {
            self.params.set_norm(id, s);
        }
    }

    /// Ids of the gate-head parameters (channel/spatial maps and biases) of every block.
    pub fn gate_head_param_ids(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .filter_map(|b| b.gate.as_ref())
            .flat_map(|g| [g.channel_w, g.channel_b, g.spatial_w, g.spatial_b])
            .collect()
    }

    /// Forward pass over `images[N×C×H×W]` with `params` bound on `tape`
    /// (see [`ParamStore::bind`]).
    pub fn forward_on(
        &self,
        tape: &Tape,
        params: &[Var],
        images: &Var,
        prompt: &Tensor,
        sampler: &mut GateSampler,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if params.len() != self.params.len() {
            return Err(Error::dim(format!(
                "{} bound params for a {}-entry table",
                params.len(),
                self.params.len()
            )));
        }
        let &[n, c, h, w] = images.shape() else {
            return Err(Error::dim(format!("images must be N×C×H×W, got {:?}", images.shape())));
        };
        if [c, h, w] != cfg.input {
            return Err(Error::dim(format!(
                "image geometry {:?} does not match network input {:?}",
                [c, h, w],
                cfg.input
            )));
        }
        if cfg.variant.uses_prompt() && prompt.shape() != [cfg.text_tokens, cfg.text_dim] {
            return Err(Error::dim(format!(
                "prompt embedding {:?} does not match {}×{}",
                prompt.shape(),
                cfg.text_tokens,
                cfg.text_dim
            )));
        }
        if let GateOverride::Fixed(m) = &opts.gates {
            if m.len() != self.blocks.len() {
                return Err(Error::dim(format!(
                    "{} fixed mask pairs for {} blocks",
                    m.len(),
                    self.blocks.len()
                )));
            }
        }
        let prompt_var = tape.constant(prompt.clone());
        let geoms = cfg.blocks();
        let mut x = images.clone();
        let mut gates = Vec::new();
        let mut norm_updates = Vec::new();
        let mut stage = 0;
        for (bi, (ids, g)) in self.blocks.iter().zip(&geoms).enumerate() {
            if g.stage != stage {
                x = ops::avg_pool2(&x)?;
                stage = g.stage;
            }
            let masks = if cfg.variant.is_gated() {
                Some(self.block_masks(tape, params, ids, g, bi, &x, &prompt_var, n, sampler, opts)?)
            } else {
                None
            };

            let (u, up1) = ops::channel_norm(
                &ops::conv2d(&x, &params[ids.conv1_w], &params[ids.conv1_b])?,
                &params[ids.norm1_scale],
                &params[ids.norm1_shift],
                self.params.norm(ids.norm1_stats),
                opts.norm,
            )?;
            let mut u = ops::relu(&u);
            if let Some(p) = opts.probe.filter(|p| p.block == bi) {
                u = ops::add(&u, &tape.constant(probe_tensor(u.shape(), p)?))?;
            }
            if let Some(m) = &masks {
                u = ops::mask_channels(&u, &m.channel.mask)?;
            }
            let (mut v, up2) = ops::channel_norm(
                &ops::conv2d(&u, &params[ids.conv2_w], &params[ids.conv2_b])?,
                &params[ids.norm2_scale],
                &params[ids.norm2_shift],
                self.params.norm(ids.norm2_stats),
                opts.norm,
            )?;
            if let Some(m) = &masks {
                let up = gate::mask_for_stage_var(&m.spatial.mask, [g.height, g.width])?;
                v = ops::mask_spatial(&v, &up)?;
            }
            let skip = match ids.skip {
                Some(wid) => ops::pointwise_conv(&x, &params[wid])?,
                None => x.clone(),
            };
            x = ops::relu(&ops::add(&v, &skip)?);
            norm_updates.extend(up1.map(|s| (ids.norm1_stats, s)));
            norm_updates.extend(up2.map(|s| (ids.norm2_stats, s)));
            gates.extend(masks);
        }
        let pooled = ops::global_avg_pool(&x)?;
        let logits = ops::linear(&pooled, &params[self.head_w], &params[self.head_b])?;
        Ok(ForwardOutput {
            logits,
            gates,
            norm_updates,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn block_masks(
        &self,
        tape: &Tape,
        params: &[Var],
        ids: &BlockIds,
        g: &BlockGeometry,
        bi: usize,
        x: &Var,
        prompt: &Var,
        n: usize,
        sampler: &mut GateSampler,
        opts: &ForwardOptions,
    ) -> Result<BlockGates> {
        let constant = |t: Tensor| GateOutput {
            mask: tape.constant(t.clone()),
            soft: tape.constant(t.clone()),
            hard: t,
        };
        match &opts.gates {
            GateOverride::AllOpen => {
                return Ok(BlockGates {
                    channel: constant(Tensor::ones(&[n, g.out_ch])),
                    spatial: constant(Tensor::ones(&[n, g.grid[0], g.grid[1]])),
                })
            }
            GateOverride::Fixed(m) => {
                let (c, s) = &m[bi];
                if c.shape() != [n, g.out_ch] || s.shape() != [n, g.grid[0], g.grid[1]] {
                    return Err(Error::dim(format!(
                        "fixed masks {:?}/{:?} for block {bi} expected [{n}, {}]/[{n}, {}, {}]",
                        c.shape(),
                        s.shape(),
                        g.out_ch,
                        g.grid[0],
                        g.grid[1]
                    )));
                }
                return Ok(BlockGates {
                    channel: constant(c.clone()),
                    spatial: constant(s.clone()),
                });
            }
            GateOverride::Learned => {}
        }
        let gid = ids.gate.as_ref().expect("gated variant has gate params");
        let scfg = &self.config.slot;
        let slots0 = slot::init_slots(x, &params[gid.init_w], &params[gid.init_b], scfg)?;
        let fused = match (self.config.variant, &self.trunk) {
            (Variant::Dynamic, _) => slots0,
            (Variant::NormalAttention, Some(t)) => {
                slot::attention_readout(&slots0, prompt, &self.trunk_params(params, t), scfg)?
            }
            (Variant::SlotAttention, Some(t)) => {
                slot::refine(&slots0, prompt, &self.trunk_params(params, t), scfg)?
            }
            _ => unreachable!("prompt variants own a trunk"),
        };
        let head = GateHeadParams {
            channel_w: &params[gid.channel_w],
            channel_b: &params[gid.channel_b],
            spatial_w: &params[gid.spatial_w],
            spatial_b: &params[gid.spatial_b],
        };
        let (cl, sl) = gate::gate_logits(&fused, &head, n, g.grid)?;
        Ok(BlockGates {
            channel: sampler.gate(&cl)?,
            spatial: sampler.gate(&sl)?,
        })
    }

    fn trunk_params<'a>(&self, params: &'a [Var], t: &TrunkIds) -> TrunkParams<'a> {
        let g = &t.gru;
        TrunkParams {
            query: &params[t.query],
            key: &params[t.key],
            value: &params[t.value],
            gru: GruParams {
                w_update: &params[g[0]],
                u_update: &params[g[1]],
                b_update: &params[g[2]],
                w_reset: &params[g[3]],
                u_reset: &params[g[4]],
                b_reset: &params[g[5]],
                w_cand: &params[g[6]],
                u_cand: &params[g[7]],
                b_cand: &params[g[8]],
            },
        }
    }

    /// Inference convenience: binds parameters as constants on a fresh tape.
    pub fn infer(
        &self,
        images: &Tensor,
        prompt: &Tensor,
        sampler: &mut GateSampler,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let tape = Tape::new();
        let params = self.params.bind_frozen(&tape);
        let x = tape.constant(images.clone());
        self.forward_on(&tape, &params, &x, prompt, sampler, opts)
    }

    pub(crate) fn from_parts(config: NetworkConfig, params: &ParamStore) -> Result<Self> {
        let mut net = Self::new(config, 0, 0.5)?;
        net.params.load_from(params)?;
        Ok(net)
    }
}

fn probe_tensor(shape: &[usize], p: ChannelProbe) -> Result<Tensor> {
    let &[n, c, h, w] = shape else { unreachable!() };
    if p.channel >= c {
        return Err(Error::dim(format!("probe channel {} ≥ {c}", p.channel)));
    }
    let mut t = Tensor::zeros(shape);
    for ni in 0..n {
        t.data_mut()[(ni * c + p.channel) * h * w..][..h * w]
            .iter_mut()
            .for_each(|v| *v = p.delta);
    }
    Ok(t)
}
