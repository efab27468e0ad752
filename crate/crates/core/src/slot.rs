//! Slot-attention fusion of visual features with prompt embeddings.
//!
//! Slots are initialized from globally pooled visual features, attend over
//! the prompt token embeddings (queries from slots, keys and values from the
//! prompt), and are refined by a GRU for `T` iterations. All ops work on
//! row-stacked batches: `N` samples × `S` slots give an `(N·S)×d` matrix,
//! while the prompt is shared by the whole batch.

use crate::error::{Error, Result};
use crate::ops::{self, GruParams};
use crate::tape::Var;

/// Softmax normalization axis of the attention matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionAxis {
    /// Each slot's weights over prompt tokens sum to 1.
    Keys,
    /// Slots compete for each token (per sample).
    Slots,
}

impl AttentionAxis {
    pub fn name(self) -> &'static str {
        match self {
            AttentionAxis::Keys => "keys",
            AttentionAxis::Slots => "slots",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "keys" => Ok(Self::Keys),
            "slots" => Ok(Self::Slots),
            _ => Err(Error::invalid(format!("attention axis '{s}' (expected keys|slots)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotConfig {
    pub slots: usize,
    pub dim: usize,
    pub iters: usize,
    pub axis: AttentionAxis,
}

impl Default for SlotConfig {
    fn default() -> Self {
        Self {
            slots: 4,
            dim: 32,
            iters: 3,
            axis: AttentionAxis::Keys,
        }
    }
}

/// Shared trunk weights: query `d×d`, key and value `d_text×d`, and the GRU.
pub struct TrunkParams<'a> {
    pub query: &'a Var,
    pub key: &'a Var,
    pub value: &'a Var,
    pub gru: GruParams<'a>,
}

/// Pools `features[N×C×H×W]` per channel and projects to `S` slots:
/// `reshape(gap(x)·W + b)` with `W[C×(S·d)]`, giving `(N·S)×d`.
pub fn init_slots(features: &Var, proj: &Var, bias: &Var, cfg: &SlotConfig) -> Result<Var> {
    let &[n, c, _, _] = features.shape() else {
        return Err(Error::dim(format!(
            "slot init expects N×C×H×W features, got {:?}",
            features.shape()
        )));
    };
    let width = cfg.slots * cfg.dim;
    if proj.shape() != [c, width] || bias.shape() != [width] {
        return Err(Error::dim(format!(
            "slot init projection {:?}/{:?} does not map {c} channels to {}×{}",
            proj.shape(),
            bias.shape(),
            cfg.slots,
            cfg.dim
        )));
    }
    let pooled = ops::global_avg_pool(features)?;
    let flat = ops::linear(&pooled, proj, bias)?;
    ops::reshape(&flat, &[n * cfg.slots, cfg.dim])
}

/// `A = softmax(Q·Kᵀ / √d)` with `Q = slots·Wq` and `K = prompt·Wk`.
pub fn attention_scores(
    slots: &Var,
    prompt: &Var,
    query: &Var,
    key: &Var,
    cfg: &SlotConfig,
) -> Result<Var> {
    let q = ops::matmul(slots, query)?;
    let k = ops::matmul(prompt, key)?;
    let logits = ops::scale(
        &ops::matmul(&q, &ops::transpose(&k)?)?,
        1.0 / (cfg.dim as f64).sqrt(),
    );
    match cfg.axis {
        AttentionAxis::Keys => ops::softmax(&logits, 1),
        AttentionAxis::Slots => {
            let &[rows, p] = logits.shape() else { unreachable!() };
            if rows % cfg.slots != 0 {
                return Err(Error::dim(format!(
                    "{rows} slot rows not divisible by {} slots",
                    cfg.slots
                )));
            }
            let grouped = ops::reshape(&logits, &[rows / cfg.slots, cfg.slots, p])?;
            ops::reshape(&ops::softmax(&grouped, 1)?, &[rows, p])
        }
    }
}

/// `F_att = A · (prompt·Wv)`.
pub fn attend(attention: &Var, prompt: &Var, value: &Var) -> Result<Var> {
    let v = ops::matmul(prompt, value)?;
    ops::matmul(attention, &v)
}

/// One refinement: `slots' = GRU(state = slots, input = F_att)`.
pub fn fusion_step(slots: &Var, prompt: &Var, trunk: &TrunkParams<'_>, cfg: &SlotConfig) -> Result<Var> {
    let a = attention_scores(slots, prompt, trunk.query, trunk.key, cfg)?;
    let f_att = attend(&a, prompt, trunk.value)?;
    ops::gru_cell(slots, &f_att, &trunk.gru)
}

/// Runs `iters` refinement steps from `slots0`; zero iterations returns `slots0`.
pub fn refine(slots0: &Var, prompt: &Var, trunk: &TrunkParams<'_>, cfg: &SlotConfig) -> Result<Var> {
    let mut slots = slots0.clone();
    for _ in 0..cfg.iters {
        slots = fusion_step(&slots, prompt, trunk, cfg)?;
    }
    Ok(slots)
}

/// Full fusion: pooled-feature slot init followed by `cfg.iters` GRU-refined attention steps.
pub fn fuse(
    features: &Var,
    prompt: &Var,
    proj: &Var,
    bias: &Var,
    trunk: &TrunkParams<'_>,
    cfg: &SlotConfig,
) -> Result<Var> {
    let slots0 = init_slots(features, proj, bias, cfg)?;
    refine(&slots0, prompt, trunk, cfg)
}

/// Single cross-attention readout without recurrence: `slots0 + A·V`.
pub fn attention_readout(
    slots0: &Var,
    prompt: &Var,
    trunk: &TrunkParams<'_>,
    cfg: &SlotConfig,
) -> Result<Var> {
    let a = attention_scores(slots0, prompt, trunk.query, trunk.key, cfg)?;
    ops::add(slots0, &attend(&a, prompt, trunk.value)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    fn cfg(slots: usize, dim: usize) -> SlotConfig {
        SlotConfig {
            slots,
            dim,
            iters: 1,
            axis: AttentionAxis::Keys,
        }
    }

    fn eye(n: usize, m: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, m]);
        for i in 0..n.min(m) {
            t.data_mut()[i * m + i] = 1.0;
        }
        t
    }

    #[test]
    fn zero_features_give_zero_slots() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let w = tape.constant(Tensor::full(&[4, 8], 0.3));
        let b = tape.constant(Tensor::zeros(&[8]));
        let s = init_slots(&x, &w, &b, &cfg(2, 4)).unwrap();
        assert_eq!(s.shape(), &[2, 4]);
        assert!(s.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_reshapes_pooled_vector() {
        let tape = Tape::new();
        // C = S·d = 4, each channel constant so pooling returns the constant
        let vals = [1.0, -2.0, 3.0, 0.5];
        let data: Vec<f64> = vals.iter().flat_map(|&v| [v; 4]).collect();
        let x = tape.constant(Tensor::new(&[1, 4, 2, 2], data).unwrap());
        let s = init_slots(
            &x,
            &tape.constant(eye(4, 4)),
            &tape.constant(Tensor::zeros(&[4])),
            &cfg(2, 2),
        )
        .unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.value().data(), &vals);
    }

    #[test]
    fn single_key_attention_is_ones() {
        let tape = Tape::new();
        let slots = tape.constant(Tensor::new(&[3, 2], vec![1., -4., 2., 7., 0.3, 0.1]).unwrap());
        let prompt = tape.constant(Tensor::new(&[1, 2], vec![0.6, 0.8]).unwrap());
        let a = attention_scores(
            &slots,
            &prompt,
            &tape.constant(eye(2, 2)),
            &tape.constant(eye(2, 2)),
            &cfg(3, 2),
        )
        .unwrap();
        assert_eq!(a.shape(), &[3, 1]);
        assert!(a.value().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn closed_form_row() {
        // d = 1: Q·Kᵀ = [0, ln 3]
        let tape = Tape::new();
        let slots = tape.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap());
        let prompt = tape.constant(Tensor::new(&[2, 1], vec![0.0, 3f64.ln()]).unwrap());
        let one = tape.constant(Tensor::ones(&[1, 1]));
        let a = attention_scores(&slots, &prompt, &one, &one, &cfg(1, 1)).unwrap();
        assert!((a.value().data()[0] - 0.25).abs() < 1e-15);
        assert!((a.value().data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn identity_attention_returns_prompt_rows() {
        let tape = Tape::new();
        let prompt_t = Tensor::new(&[3, 3], (0..9).map(|v| v as f64 * 0.1).collect()).unwrap();
        let prompt = tape.constant(prompt_t.clone());
        let a = tape.constant(eye(3, 3));
        let f = attend(&a, &prompt, &tape.constant(eye(3, 3))).unwrap();
        assert!(f.value().bitwise_eq(&prompt_t));
    }

    #[test]
    fn uniform_attention_gives_mean_value() {
        let tape = Tape::new();
        let prompt_t = Tensor::new(&[4, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let prompt = tape.constant(prompt_t);
        let a = tape.constant(Tensor::full(&[2, 4], 0.25));
        let wv = tape.constant(Tensor::from_rows(&[&[1.0, 0.5], &[-1.0, 2.0]]));
        let f = attend(&a, &prompt, &wv).unwrap();
        // mean prompt row = [4, 5]; value = [4 - 5, 2 + 10]
        for row in f.value().data().chunks_exact(2) {
            assert!((row[0] + 1.0).abs() < 1e-12);
            assert!((row[1] - 12.0).abs() < 1e-12);
        }
    }

    #[test]
    fn slot_axis_normalizes_over_slots() {
        let tape = Tape::new();
        let slots = tape.constant(Tensor::new(&[4, 2], vec![1., 0., 0., 1., 2., 1., -1., 0.5]).unwrap());
        let prompt = tape.constant(Tensor::new(&[3, 2], vec![1., 0., 0., 1., 0.5, 0.5]).unwrap());
        let mut c = cfg(2, 2);
        c.axis = AttentionAxis::Slots;
        let a = attention_scores(&slots, &prompt, &tape.constant(eye(2, 2)), &tape.constant(eye(2, 2)), &c)
            .unwrap();
        let d = a.value().data();
        for sample in 0..2 {
            for key in 0..3 {
                let s: f64 = (0..2).map(|sl| d[(sample * 2 + sl) * 3 + key]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
