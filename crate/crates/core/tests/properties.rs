use dyngate_core::data::{self, DomainDataset, DomainSpec, Split};
use dyngate_core::gate::{self, GateMask, GateSampler, GateSampling, MaskKind};
use dyngate_core::loss::{self, BoundSchedule};
use dyngate_core::net::{count_macs, NetworkConfig};
use dyngate_core::ops;
use dyngate_core::prompt;
use dyngate_core::rng;
use dyngate_core::slot::{self, AttentionAxis, SlotConfig, TrunkParams};
use dyngate_core::tape::{Tape, Var};
use dyngate_core::train::{sgd_step, SgdState};
use dyngate_core::Tensor;
use proptest::prelude::*;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn vals(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

fn bits(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { 0.0 }), n)
}

/// Direct evaluation of the two-sided squared-hinge bound penalty.
fn bound_oracle(ds: &[f64], p: f64, td: f64) -> (f64, f64) {
    let lo = p * td.sqrt();
    let hi = 1.0 - p * (1.0 - td.sqrt());
    ds.iter().fold((0.0, 0.0), |(a, b), &d| {
        (a + (lo - d).max(0.0).powi(2), b + (d - hi).max(0.0).powi(2))
    })
}

fn small_net() -> NetworkConfig {
    NetworkConfig {
        widths: vec![4, 8],
        input: [3, 16, 16],
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_slices_are_distributions(axis in 0usize..3, x in vals(24, -30.0, 30.0)) {
        let t = Tape::new();
        let y = ops::softmax(&t.constant(tensor(&[2, 3, 4], x)), axis).unwrap();
        let y = y.value().data();
        let shape = [2usize, 3, 4];
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        for o in 0..24 / (len * inner) {
            for i in 0..inner {
                let s: f64 = (0..len).map(|j| y[o * len * inner + j * inner + i]).sum();
                prop_assert!((s - 1.0).abs() <= 1e-9);
            }
        }
        prop_assert!(y.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn shared_subexpression_doubles_gradient(x in vals(5, -2.0, 2.0)) {
        let g = |v: &Var| ops::sum(&ops::mul(&ops::tanh(v), v).unwrap());
        let t = Tape::new();
        let xv = t.leaf(tensor(&[5], x.clone()));
        let once = t.backward(&g(&xv)).unwrap().get_or_zeros(&xv);
        let t2 = Tape::new();
        let xv2 = t2.leaf(tensor(&[5], x));
        let gx = g(&xv2);
        let twice = t2.backward(&ops::add(&gx, &gx).unwrap()).unwrap().get_or_zeros(&xv2);
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn upsampling_preserves_density(m in bits(8), fy in 1usize..4, fx in 1usize..4) {
        let base = tensor(&[2, 2, 2], m);
        let up = ops::nearest_upsample_tensor(&base, fy, fx).unwrap();
        prop_assert_eq!(up.mean(), base.mean());
        let staged = gate::mask_for_stage(&base, [2 * fy, 2 * fx]).unwrap();
        prop_assert_eq!(staged.mean(), base.mean());
    }

    #[test]
    fn embedding_is_pure(a in "[a-z]{1,8}", b in "[a-z]{1,8}", seed in 0u64..1000) {
        let e1 = prompt::embed(&a, 16, 4, seed).unwrap();
        let _ = prompt::embed(&b, 16, 4, seed).unwrap();
        let e2 = prompt::embed(&a, 16, 4, seed).unwrap();
        prop_assert!(e1.bitwise_eq(&e2));
    }

    #[test]
    fn seed_changes_embeddings(seed in 0u64..1000) {
        for name in ["photo", "sketch", "cartoon"] {
            let a = prompt::DomainPrompt::hashed(name, 16, 4, seed).unwrap();
            let b = prompt::DomainPrompt::hashed(name, 16, 4, seed + 1).unwrap();
            prop_assert!(!a.embedding.bitwise_eq(&b.embedding));
        }
    }

    #[test]
    fn fusion_is_invariant_to_token_order(seed in 0u64..500, keys_axis in prop::bool::ANY) {
        let cfg = SlotConfig {
            slots: 3,
            dim: 4,
            iters: 2,
            axis: if keys_axis { AttentionAxis::Keys } else { AttentionAxis::Slots },
        };
        let mut r = rng::stream(seed, "fusion");
        let mut draw = |shape: &[usize]| {
            let t = dyngate_core::gate::gumbel_noise(shape, &mut r);
            t.map(|v| 0.3 * v)
        };
        let feats = draw(&[2, 3, 2, 2]);
        let prompt_t = draw(&[5, 6]);
        let ws: Vec<Tensor> = [
            vec![3, 12], vec![12], vec![4, 4], vec![6, 4], vec![6, 4],
            vec![4, 4], vec![4, 4], vec![4], vec![4, 4], vec![4, 4], vec![4], vec![4, 4], vec![4, 4], vec![4],
        ].iter().map(|s| draw(s)).collect();
        let perm = [3usize, 0, 4, 2, 1];
        let mut permuted = Vec::new();
        for &i in &perm {
            permuted.extend_from_slice(&prompt_t.data()[i * 6..(i + 1) * 6]);
        }
        let run = |p: Tensor| {
            let t = Tape::new();
            let v: Vec<Var> = ws.iter().map(|w| t.constant(w.clone())).collect();
            let trunk = TrunkParams {
                query: &v[2],
                key: &v[3],
                value: &v[4],
                gru: ops::GruParams {
                    w_update: &v[5], u_update: &v[6], b_update: &v[7],
                    w_reset: &v[8], u_reset: &v[9], b_reset: &v[10],
                    w_cand: &v[11], u_cand: &v[12], b_cand: &v[13],
                },
            };
            slot::fuse(&t.constant(feats.clone()), &t.constant(p), &v[0], &v[1], &trunk, &cfg)
                .unwrap()
                .value()
                .clone()
        };
        let a = run(prompt_t.clone());
        let b = run(tensor(&[5, 6], permuted));
        prop_assert_eq!(a.shape(), &[6, 4]);
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn fusion_shape_ignores_prompt_length_and_resolution(p in 1usize..7, hw in 1usize..5, iters in 0usize..5) {
        let cfg = SlotConfig { slots: 2, dim: 4, iters, axis: AttentionAxis::Keys };
        let t = Tape::new();
        let c = |s: &[usize], v: f64| t.constant(Tensor::full(s, v));
        let gru_w = c(&[4, 4], 0.1);
        let gru_b = c(&[4], 0.0);
        let trunk = TrunkParams {
            query: &c(&[4, 4], 0.2),
            key: &c(&[6, 4], 0.2),
            value: &c(&[6, 4], 0.2),
            gru: ops::GruParams {
                w_update: &gru_w, u_update: &gru_w, b_update: &gru_b,
                w_reset: &gru_w, u_reset: &gru_w, b_reset: &gru_b,
                w_cand: &gru_w, u_cand: &gru_w, b_cand: &gru_b,
            },
        };
        let out = slot::fuse(
            &c(&[1, 3, hw, hw], 1.0),
            &c(&[p, 6], 0.5),
            &c(&[3, 8], 0.1),
            &c(&[8], 0.0),
            &trunk,
            &cfg,
        ).unwrap();
        prop_assert_eq!(out.shape(), &[2, 4]);
        prop_assert!(out.value().is_finite());
    }

    #[test]
    fn train_forward_is_binarized_soft_sample(logits in vals(12, -4.0, 4.0), seed in 0u64..1000, temp in 0.3f64..3.0) {
        let t = Tape::new();
        let l = t.leaf(tensor(&[3, 4], logits));
        let mut s = GateSampler::new(GateSampling::Train(rng::stream(seed, "g")), temp, 0.5);
        let out = s.gate(&l).unwrap();
        let want = out.soft.value().map(|y| if y >= 0.5 { 1.0 } else { 0.0 });
        prop_assert!(out.mask.value().bitwise_eq(&want));
        prop_assert!(out.hard.bitwise_eq(&want));
    }

    #[test]
    fn eval_gates_are_deterministic(logits in vals(12, -4.0, 4.0), threshold in 0.05f64..0.95) {
        let run = || {
            let t = Tape::new();
            let l = t.leaf(tensor(&[3, 4], logits.clone()));
            GateSampler::eval(threshold).gate(&l).unwrap().mask.value().clone()
        };
        let (a, b) = (run(), run());
        prop_assert!(a.bitwise_eq(&b));
        prop_assert!(a.bitwise_eq(&gate::binarize(&tensor(&[3, 4], logits.clone()), threshold)));
    }

    #[test]
    fn macs_never_grow_when_a_gate_closes(
        c1 in bits(4), s1 in bits(64), c2 in bits(8), s2 in bits(64),
        which in 0usize..4, pick in 0usize..64,
    ) {
        let cfg = small_net();
        let mk = |c: &[f64], s: &[f64], cw: usize| {
            vec![
                GateMask::new(MaskKind::Channel, tensor(&[cw], c.to_vec()), 0.5, true).unwrap(),
                GateMask::new(MaskKind::Spatial, tensor(&[8, 8], s.to_vec()), 0.5, true).unwrap(),
            ]
        };
        let masks = |c1: &[f64], s1: &[f64], c2: &[f64], s2: &[f64]| {
            let mut m = mk(c1, s1, 4);
            m.extend(mk(c2, s2, 8));
            m
        };
        let before = count_macs(&cfg, &masks(&c1, &s1, &c2, &s2)).unwrap();
        let (mut c1b, mut s1b, mut c2b, mut s2b) = (c1.clone(), s1.clone(), c2.clone(), s2.clone());
        match which {
            0 => c1b[pick % 4] = 0.0,
            1 => s1b[pick] = 0.0,
            2 => c2b[pick % 8] = 0.0,
            _ => s2b[pick] = 0.0,
        }
        let after = count_macs(&cfg, &masks(&c1b, &s1b, &c2b, &s2b)).unwrap();
        prop_assert!(after.gated <= before.gated);
        prop_assert_eq!(after.dense, before.dense);
    }

    #[test]
    fn bound_loss_zero_iff_inside_interval(ds in vals(5, 0.0, 1.0), td in 0.01f64..0.99, epoch in 0usize..80) {
        let p = loss::anneal_p(epoch as i64, loss::DEFAULT_ANNEAL_RATE).unwrap();
        let (lo, hi) = loss::density_bounds(p, td);
        let (a, b) = loss::bound_terms(&ds, p, td).unwrap();
        let inside = ds.iter().all(|&d| (lo..=hi).contains(&d));
        prop_assert_eq!(a + b == 0.0, inside);
        let (oa, ob) = bound_oracle(&ds, p, td);
        prop_assert!((a - oa).abs() <= 1e-12 && (b - ob).abs() <= 1e-12);
    }

    #[test]
    fn bound_loss_is_permutation_invariant(mut ds in vals(6, 0.0, 1.0), td in 0.01f64..0.99, epoch in 0usize..80, rot in 0usize..6) {
        let p = loss::anneal_p(epoch as i64, 0.05).unwrap();
        let (a, b) = loss::bound_terms(&ds, p, td).unwrap();
        ds.rotate_left(rot);
        ds.reverse();
        let (c, d) = loss::bound_terms(&ds, p, td).unwrap();
        prop_assert!((a - c).abs() <= 1e-15 && (b - d).abs() <= 1e-15);
    }

    #[test]
    fn bound_gradient_matches_differences(ds in vals(4, 0.0, 1.0), td in 0.05f64..0.95, epoch in 0usize..60) {
        let s = BoundSchedule { target_rate: td, ..Default::default() }.at_epoch(epoch);
        let (lo, hi) = s.bounds();
        prop_assume!(ds.iter().all(|&d| (d - lo).abs() > 1e-3 && (d - hi).abs() > 1e-3));
        let t = Tape::new();
        let vars: Vec<Var> = ds.iter().map(|&d| t.leaf(Tensor::scalar(d))).collect();
        let (l, u) = loss::bound_terms_var(&vars, s.p(), td).unwrap();
        let g = t.backward(&ops::add(&l, &u).unwrap()).unwrap();
        let h = 1e-6;
        for (i, v) in vars.iter().enumerate() {
            let f = |x: f64| {
                let mut e = ds.clone();
                e[i] = x;
                let (a, b) = bound_oracle(&e, s.p(), td);
                a + b
            };
            let num = (f(ds[i] + h) - f(ds[i] - h)) / (2.0 * h);
            let tape = g.get_or_zeros(v).item();
            prop_assert!((tape - num).abs() / tape.abs().max(num.abs()).max(1e-8) <= 1e-6);
        }
    }

    #[test]
    fn feasible_interval_widens(td in 0.01f64..0.99, epoch in 0usize..200) {
        let s = BoundSchedule { target_rate: td, ..Default::default() };
        let (a0, b0) = s.at_epoch(epoch).bounds();
        let (a1, b1) = s.at_epoch(epoch + 1).bounds();
        prop_assert!(a0 <= b0);
        prop_assert!(b1 - a1 > b0 - a0);
        let (z0, z1) = s.at_epoch(0).bounds();
        prop_assert_eq!(z0, td.sqrt());
        prop_assert_eq!(z1, td.sqrt());
    }

    #[test]
    fn sgd_matches_update_rule(w in vals(4, -1.0, 1.0), g in vals(4, -1.0, 1.0), lr in 0.0f64..0.5, wd in 0.0f64..0.1, m in 0.0f64..0.99) {
        let mut params = vec![tensor(&[4], w.clone())];
        let grads = vec![tensor(&[4], g.clone())];
        let mut st = SgdState::new();
        sgd_step(&mut params, &grads, lr, wd, m, &mut st).unwrap();
        let mut buf = [0.0; 4];
        let mut want = w.clone();
        for i in 0..4 {
            buf[i] = g[i] + wd * w[i];
            want[i] -= lr * buf[i];
        }
        prop_assert_eq!(params[0].data(), &want[..]);
        sgd_step(&mut params, &grads, lr, wd, m, &mut st).unwrap();
        for i in 0..4 {
            let g2 = g[i] + wd * want[i];
            buf[i] = m * buf[i] + g2;
            want[i] -= lr * buf[i];
        }
        prop_assert_eq!(params[0].data(), &want[..]);
    }

    #[test]
    fn tensor_bytes_round_trip(shape in prop::collection::vec(1usize..4, 1..4), seed in 0u64..1000) {
        let n: usize = shape.iter().product();
        let mut r = rng::stream(seed, "t");
        let t = tensor(&shape, (0..n).map(|_| gate::gumbel(&mut r)).collect());
        prop_assert!(Tensor::from_bytes(&t.to_bytes()).unwrap().bitwise_eq(&t));
    }

    #[test]
    fn dataset_bytes_round_trip(n in 1usize..6, k in 2usize..5, seed in 0u64..1000) {
        let mut r = rng::stream(seed, "ds");
        let px: Vec<f64> = (0..n * 3 * 2 * 2).map(|_| gate::gumbel(&mut r)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let ds = DomainDataset::new("art", Split::Test, seed, k, [3, 2, 2], px, labels).unwrap();
        prop_assert_eq!(DomainDataset::from_bytes(&ds.to_bytes()).unwrap(), ds);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn shape_class_survives_every_preset(seed in 0u64..1000) {
        let sets: Vec<DomainDataset> = data::DEFAULT_DOMAINS
            .iter()
            .map(|d| data::generate(&DomainSpec::preset(d).unwrap(), 4, 8, seed, Split::Test).unwrap())
            .collect();
        for s in &sets[1..] {
            prop_assert_eq!(s.labels(), sets[0].labels());
            prop_assert!(s.pixels() != sets[0].pixels());
        }
        for i in 0..8 {
            let a = data::geometry_mask(seed, Split::Test, i, 4);
            prop_assert_eq!(&a, &data::geometry_mask(seed, Split::Test, i, 4));
        }
    }
}
