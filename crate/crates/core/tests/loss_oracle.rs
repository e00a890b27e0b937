//! Boundary-weighted BCE + Dice against a scalar reference written from the
//! definition, one pixel at a time.

mod common;

use common::oracles::{instance, loss_sweep, pooled};
use polyp_ses::training::{boundary_weights, weighted_bce_dice, LossConfig};
use polyp_ses::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

#[test]
fn hundred_random_instances_match_reference() {
    let (worst64, worst32) = loss_sweep(100);
    assert!(worst64 < TOL, "f64 max abs err {worst64:e}");
    assert!(worst32 < TOL, "f32 max abs err {worst32:e}");
    println!("max abs err {worst64:e} (f64), {worst32:e} (f32)");
}
#[test]
fn pooling_weights_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (_, g, cfg) = instance(&mut rng);
        let (n, _, h, w) = g.dims4().unwrap();
        let got = boundary_weights(&g, &cfg).unwrap();
        for b in 0..n {
            let gb = &g.data()[b * h * w..(b + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let want = 1.0
                        + cfg.boundary_factor
                            * (pooled(gb, h, w, cfg.boundary_window, y, x) - gb[i]).abs();
                    assert!((got.data()[b * h * w + i] - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn hand_computed_two_pixel_case() {
    // Window 1 gives unit weights: BCE = -(ln 0.8 + ln 0.6)/2 = 0.36698...,
    // Dice = 1 - (2·0.8 + 1)/(1.2 + 1 + 1) = 0.1875.
    let p = Tensor::new(&[1, 1, 1, 2], vec![0.8, 0.4]).unwrap();
    let g = Tensor::new(&[1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
    let cfg = LossConfig {
        boundary_factor: 5.0,
        boundary_window: 1,
    };
    let mut tape = Tape::<f64>::new();
    let pv = tape.leaf(p, true);
    let l = weighted_bce_dice(&mut tape, pv, &g, &cfg).unwrap();
    let want = -(0.8f64.ln() + 0.6f64.ln()) / 2.0 + 0.1875;
    assert!((tape.value(l).data()[0] - want).abs() < 1e-12);
}
