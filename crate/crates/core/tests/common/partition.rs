//! Semantic partition properties, as plain checks so they can run under
//! proptest's macro or an explicit runner.

use polyp_ses::ses::{partition_semantics, PartitionConfig, PatchLabel};
use polyp_ses::Tensor;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

pub type Case = (usize, usize, usize, Vec<f64>, PartitionConfig);

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

/// Random `1×1×h×w` map in `[0, 1]` with patch-aligned extents.
pub fn partition_case() -> impl Strategy<Value = Case> {
    (
        1usize..=4,
        1usize..=4,
        1usize..=4,
        0.02f64..0.5,
        0.5f64..0.98,
    )
        .prop_flat_map(|(p, gh, gw, lo, hi)| {
            let n = p * gh * p * gw;
            let values = prop::collection::vec(
                prop_oneof![Just(0.0), Just(1.0), Just(lo), Just(hi), 0.0f64..=1.0],
                n,
            );
            (
                Just(p),
                Just(gh * p),
                Just(gw * p),
                values,
                Just(PartitionConfig {
                    patch_size: p,
                    tau_lo: lo,
                    tau_hi: hi,
                }),
            )
        })
}

/// S1 and S2 never overlap, follow whole patches, and relabelling the
/// rendered regions reproduces them.
pub fn disjoint_aligned_idempotent((p, h, w, values, cfg): Case) -> Result<(), TestCaseError> {
    let map = tensor(&[1, 1, h, w], values);
    let a = partition_semantics(&map, &cfg).unwrap();
    let b = partition_semantics(&map, &cfg).unwrap();
    prop_assert_eq!(&a, &b);
    for i in 0..h * w {
        prop_assert!(!(a.s1_mask[i] && a.s2_mask[i]));
    }
    let (_, gw) = a.grid_dims();
    for y in 0..h {
        for x in 0..w {
            let label = a.patch_grid[(y / p) * gw + x / p];
            prop_assert_eq!(a.s1_mask[y * w + x], label == PatchLabel::Ambiguous);
            prop_assert_eq!(a.s2_mask[y * w + x], label == PatchLabel::Solid);
        }
    }
    let rendered: Vec<f64> = (0..h * w)
        .map(|i| {
            if a.s2_mask[i] {
                1.0
            } else if a.s1_mask[i] {
                (cfg.tau_lo + cfg.tau_hi) / 2.0
            } else {
                0.0
            }
        })
        .collect();
    let again = partition_semantics(&tensor(&[1, 1, h, w], rendered), &cfg).unwrap();
    prop_assert_eq!(&again.s1_mask, &a.s1_mask);
    prop_assert_eq!(&again.s2_mask, &a.s2_mask);
    Ok(())
}

pub fn raise_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..0.6, 64)
}

/// Raising pixel values never moves a patch down the order
/// background < ambiguous < solid.
pub fn raising_never_demotes(
    (_p, h, w, values, cfg): Case,
    raise: Vec<f64>,
) -> Result<(), TestCaseError> {
    let lifted: Vec<f64> = values
        .iter()
        .zip(raise.iter().cycle())
        .map(|(v, r)| (v + r).min(1.0))
        .collect();
    let before = partition_semantics(&tensor(&[1, 1, h, w], values), &cfg).unwrap();
    let after = partition_semantics(&tensor(&[1, 1, h, w], lifted), &cfg).unwrap();
    for (b, a) in before.patch_grid.iter().zip(&after.patch_grid) {
        prop_assert!(a >= b, "{:?} became {:?}", b, a);
    }
    Ok(())
}
