//! Randomized invariants of the tensor engine, semantic partition, metrics,
//! loss and optimizer.

mod common;

use common::partition;
use polyp_ses::metrics::{dice, iou, mae, Overlap, SampleScore};
use polyp_ses::ses::{partition_semantics, PartitionConfig};
use polyp_ses::training::{adamw_step, weighted_bce_dice, AdamWConfig, LossConfig};
use polyp_ses::{EvalReport, Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

fn shaped(max_side: usize) -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    prop::collection::vec(1..=max_side, 1..=3).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        (Just(shape), prop::collection::vec(-30.0f64..30.0, n))
    })
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_ignores_shifts((shape, data) in shaped(5), axis_pick in 0usize..3, shift in -50.0f64..50.0) {
        let axis = axis_pick % shape.len();
        let x = tensor(&shape, data.clone());
        let shifted = tensor(&shape, data.iter().map(|v| v + shift).collect());
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(x), tape.constant(shifted));
        let ya = tape.softmax(a, axis).unwrap();
        let yb = tape.softmax(b, axis).unwrap();
        let (ya, yb) = (tape.value(ya).clone(), tape.value(yb).clone());
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|k| ya.data()[(o * len + k) * inner + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
        for (p, q) in ya.data().iter().zip(yb.data()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_softmax_confines_weight_to_keys(
        rows in 1usize..4,
        scores in prop::collection::vec(-10.0f64..10.0, 12),
        mask in prop::collection::vec(any::<bool>(), 4),
    ) {
        let data: Vec<f64> = scores.iter().cycle().take(rows * 4).copied().collect();
        let mut tape = Tape::new();
        let x = tape.constant(tensor(&[1, rows, 4], data));
        let y = tape.masked_softmax(x, &mask).unwrap();
        let y = tape.value(y);
        for r in 0..rows {
            let row = &y.data()[r * 4..(r + 1) * 4];
            for (k, &v) in row.iter().enumerate() {
                if !mask[k] {
                    prop_assert_eq!(v, 0.0);
                }
                prop_assert!(v.is_finite());
            }
            let s: f64 = row.iter().sum();
            let expect = if mask.iter().any(|&m| m) { 1.0 } else { 0.0 };
            prop_assert!((s - expect).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn partition_is_disjoint_aligned_and_idempotent(case in partition::partition_case()) {
        partition::disjoint_aligned_idempotent(case)?;
    }

    #[test]
    fn raising_pixels_never_demotes_a_patch(case in partition::partition_case(), raise in partition::raise_strategy()) {
        partition::raising_never_demotes(case, raise)?;
    }
}

fn binary_pair(max: usize) -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
    (1usize..=max).prop_flat_map(|n| {
        let bits = || prop::collection::vec(prop_oneof![Just(0.0f32), Just(1.0f32)], n);
        (bits(), bits())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn dice_iou_identity((p, g) in binary_pair(64)) {
        let n = p.len();
        let (pt, gt) = (Tensor::new(&[n], p).unwrap(), Tensor::new(&[n], g).unwrap());
        let o = Overlap::of(&pt, &gt).unwrap();
        // Counting identity behind dice = 2·iou / (1 + iou): |P| + |G| = |P ∪ G| + |P ∩ G|.
        prop_assert_eq!(o.pred + o.gt, o.union() + o.intersection);
        let (d, j) = (dice(&pt, &gt).unwrap(), iou(&pt, &gt).unwrap());
        prop_assert!(d >= j);
        prop_assert_eq!(d == j, j == 0.0 || j == 1.0);
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-15);
    }

    #[test]
    fn metrics_ignore_joint_permutation((p, g) in binary_pair(32), seed in any::<u64>(), soft in prop::collection::vec(0.0f32..1.0, 32)) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = p.len();
        let soft: Vec<f32> = soft.into_iter().take(n).chain(std::iter::repeat(0.5)).take(n).collect();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let perm = |v: &[f32]| idx.iter().map(|&i| v[i]).collect::<Vec<f32>>();
        let t = |v: Vec<f32>| Tensor::new(&[n], v).unwrap();
        let (pa, ga, sa) = (t(p.clone()), t(g.clone()), t(soft.clone()));
        let (pb, gb, sb) = (t(perm(&p)), t(perm(&g)), t(perm(&soft)));
        prop_assert_eq!(dice(&pa, &ga).unwrap(), dice(&pb, &gb).unwrap());
        prop_assert_eq!(iou(&pa, &ga).unwrap(), iou(&pb, &gb).unwrap());
        prop_assert!((mae(&sa, &ga).unwrap() - mae(&sb, &gb).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_beats_constant_half((_, g) in binary_pair(32)) {
        let n = g.len();
        let gt = Tensor::new(&[n], g.clone()).unwrap();
        let half = Tensor::new(&[n], vec![0.5f32; n]).unwrap();
        prop_assert!(mae(&gt, &gt).unwrap() <= mae(&half, &gt).unwrap());
    }

    #[test]
    fn report_is_invariant_to_sample_order(scores in prop::collection::vec((0.0f64..1.0, 0.0f64..0.5), 1..8), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let samples: Vec<SampleScore> = scores
            .iter()
            .enumerate()
            .map(|(i, &(d, m))| SampleScore { id: format!("s{i:02}"), dice: d, iou: d / (2.0 - d), mae: m })
            .collect();
        let mut shuffled = samples.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = EvalReport::new("d", "t", samples).unwrap();
        let b = EvalReport::new("d", "t", shuffled).unwrap();
        prop_assert_eq!(a.to_csv(), b.to_csv());
        prop_assert!((a.mdice - b.mdice).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative(
        p in prop::collection::vec(0.0f64..=1.0, 64),
        g in prop::collection::vec(prop_oneof![Just(0.0f64), Just(1.0f64)], 64),
        window in prop_oneof![Just(1usize), Just(3), Just(7), Just(31)],
    ) {
        let mut tape = Tape::new();
        let pv = tape.leaf(tensor(&[1, 1, 8, 8], p), true);
        let cfg = LossConfig { boundary_factor: 5.0, boundary_window: window };
        let l = weighted_bce_dice(&mut tape, pv, &tensor(&[1, 1, 8, 8], g), &cfg).unwrap();
        prop_assert!(tape.value(l).data()[0] >= 0.0);
    }

    #[test]
    fn adamw_with_zero_lr_and_decay_is_identity(
        params in prop::collection::vec(-5.0f64..5.0, 1..16),
        grads in prop::collection::vec(-5.0f64..5.0, 16),
        t in 1u64..100,
    ) {
        let n = params.len();
        let mut p = params.clone();
        let (mut m, mut v) = (vec![0.1; n], vec![0.2; n]);
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        adamw_step(&mut p, &grads[..n], &mut m, &mut v, &cfg, 0.0, t).unwrap();
        prop_assert_eq!(p, params);
    }
}

#[test]
fn empty_regions_give_finite_attention() {
    use polyp_ses::params::{init_rng, Ctx, Mode, ParamStore};
    use polyp_ses::ses::CrossLayerAttention;
    let mut store = ParamStore::<f64>::new();
    let ca = CrossLayerAttention::new(&mut store, "ca", 3, &mut init_rng(0, 0));
    let mut rng = init_rng(1, 0);
    for map_value in [0.0, 0.05, 1.0] {
        let map = Tensor::full(&[2, 1, 4, 4], map_value);
        let part = partition_semantics(&map, &PartitionConfig::default()).unwrap();
        assert!(
            !part.s1_mask.iter().any(|&m| m),
            "uniform maps never produce S1"
        );
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Eval);
        let f1 = ctx
            .tape
            .constant(Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng));
        let m = ctx.tape.constant(map);
        let out = ca.forward(&mut ctx, f1, m, &part.s1_mask).unwrap();
        let v = tape.value(out.output);
        assert!(v.all_finite());
        assert!(v.data().iter().all(|&x| x == 0.0));
    }
}
