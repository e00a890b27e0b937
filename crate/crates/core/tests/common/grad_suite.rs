//! Finite-difference checks of every tape primitive and every composite
//! block, in f64, over five seeds each. Each function panics on failure.

use polyp_ses::decoder::{LgsfBlock, Msfa};
use polyp_ses::gradcheck::{check, check_block, GradCheckConfig, GradCheckReport};
use polyp_ses::params::{init_rng, Mode, ParamStore};
use polyp_ses::ses::{AttentionGate, CrossLayerAttention};
use polyp_ses::tensor::{ConvGeometry, NormMode};
use polyp_ses::training::{weighted_bce_dice, LossConfig};
use polyp_ses::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9e37)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

fn cfg(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        seed,
        ..Default::default()
    }
}

fn assert_ok(what: &str, seed: u64, r: Result<GradCheckReport>) {
    let r = r.unwrap_or_else(|e| panic!("{what} seed {seed}: {e}"));
    for c in &r.inputs {
        assert!(
            c.rel_err < TOL,
            "{what} seed {seed} input {}: rel err {:.3e}",
            c.name,
            c.rel_err
        );
    }
}

type Unary = fn(&mut Tape<f64>, Var) -> Result<Var>;

pub fn elementwise_primitives() {
    let unary: [(&str, Unary); 7] = [
        ("relu", |t, x| Ok(t.relu(x))),
        ("sigmoid", |t, x| Ok(t.sigmoid(x))),
        ("gelu", |t, x| Ok(t.gelu(x))),
        ("scale", |t, x| Ok(t.scale(x, -1.7))),
        ("add_scalar", |t, x| Ok(t.add_scalar(x, 0.3))),
        ("clamp", |t, x| Ok(t.clamp(x, -0.5, 0.7))),
        ("sum", |t, x| Ok(t.sum(x))),
    ];
    for seed in SEEDS {
        let mut r = rng(seed);
        let x = randn(&[2, 3, 4], &mut r);
        for (name, f) in unary {
            assert_ok(
                name,
                seed,
                check(&[("x", x.clone())], |t, v| f(t, v[0]), &cfg(seed)),
            );
        }
        let pos = Tensor::rand_uniform(&[2, 3, 4], 0.2, 2.0, &mut r);
        assert_ok(
            "log",
            seed,
            check(&[("x", pos.clone())], |t, v| t.log(v[0]), &cfg(seed)),
        );
        let y = randn(&[2, 3, 4], &mut r);
        type Binary = fn(&mut Tape<f64>, Var, Var) -> Result<Var>;
        let binary: [(&str, Binary); 4] = [
            ("add", |t, a, b| t.add(a, b)),
            ("sub", |t, a, b| t.sub(a, b)),
            ("mul", |t, a, b| t.mul(a, b)),
            ("div", |t, a, b| t.div(a, b)),
        ];
        for (name, f) in binary {
            let b = if name == "div" {
                pos.clone()
            } else {
                y.clone()
            };
            assert_ok(
                name,
                seed,
                check(
                    &[("a", x.clone()), ("b", b)],
                    |t, v| f(t, v[0], v[1]),
                    &cfg(seed),
                ),
            );
        }
    }
}

pub fn softmax_and_masked_softmax() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let x = randn(&[2, 3, 5], &mut r);
        for axis in 0..3 {
            assert_ok(
                "softmax",
                seed,
                check(
                    &[("x", x.clone())],
                    |t, v| t.softmax(v[0], axis),
                    &cfg(seed),
                ),
            );
        }
        let mut mask: Vec<bool> = (0..10).map(|_| r.gen_bool(0.5)).collect();
        mask[0] = true;
        mask[5..].iter_mut().for_each(|m| *m = false);
        assert_ok(
            "masked_softmax",
            seed,
            check(
                &[("x", x)],
                |t, v| t.masked_softmax(v[0], &mask),
                &cfg(seed),
            ),
        );
    }
}

pub fn convolution_geometries() {
    let cases = [
        (ConvGeometry::new(1, 0, 1), 3, 2),
        (ConvGeometry::new(1, 2, 2), 3, 2),
        (ConvGeometry::new(2, 1, 1), 3, 2),
        (ConvGeometry::new(4, 2, 1), 5, 2),
        (ConvGeometry::new(1, 3, 1).grouped(4), 7, 4),
        (ConvGeometry::new(1, 0, 1), 1, 2),
    ];
    for seed in SEEDS {
        for &(g, k, cin) in &cases {
            let mut r = rng(seed);
            let x = randn(&[2, cin, 8, 8], &mut r);
            let cout = if g.groups > 1 { cin } else { 3 };
            let w = Tensor::randn(&[cout, cin / g.groups, k, k], 0.5, &mut r);
            let b = randn(&[cout], &mut r);
            let res = check(
                &[("x", x), ("w", w), ("b", b)],
                |t, v| t.conv2d(v[0], v[1], Some(v[2]), g),
                &cfg(seed),
            );
            assert_ok(&format!("conv2d {g:?} k{k}"), seed, res);
        }
    }
}

pub fn normalization_primitives() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let x = randn(&[2, 3, 4, 4], &mut r);
        let g = Tensor::rand_uniform(&[3], 0.5, 1.5, &mut r);
        let b = randn(&[3], &mut r);
        let inputs = [("x", x), ("gamma", g), ("beta", b)];
        assert_ok(
            "batch_norm train",
            seed,
            check(
                &inputs,
                |t, v| Ok(t.batch_norm(v[0], v[1], v[2], NormMode::Train, 1e-5)?.0),
                &cfg(seed),
            ),
        );
        let (mean, var) = ([0.1, -0.2, 0.3], [1.2, 0.7, 2.0]);
        assert_ok(
            "batch_norm eval",
            seed,
            check(
                &inputs,
                |t, v| {
                    Ok(t.batch_norm(
                        v[0],
                        v[1],
                        v[2],
                        NormMode::Eval {
                            mean: &mean,
                            var: &var,
                        },
                        1e-5,
                    )?
                    .0)
                },
                &cfg(seed),
            ),
        );
        assert_ok(
            "layer_norm_channels",
            seed,
            check(
                &inputs,
                |t, v| t.layer_norm_channels(v[0], v[1], v[2], 1e-5),
                &cfg(seed),
            ),
        );
    }
}

pub fn spatial_primitives() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let x = randn(&[2, 3, 6, 6], &mut r);
        let c = cfg(seed);
        let one = |x: &Tensor<f64>| vec![("x", x.clone())];
        assert_ok(
            "resize up",
            seed,
            check(&one(&x), |t, v| t.resize_bilinear(v[0], 11, 9), &c),
        );
        assert_ok(
            "resize down",
            seed,
            check(&one(&x), |t, v| t.resize_bilinear(v[0], 3, 4), &c),
        );
        assert_ok(
            "avg_pool incl",
            seed,
            check(&one(&x), |t, v| t.avg_pool2d(v[0], 3, 1, 1, true), &c),
        );
        assert_ok(
            "avg_pool excl",
            seed,
            check(&one(&x), |t, v| t.avg_pool2d(v[0], 5, 2, 2, false), &c),
        );
        assert_ok(
            "channel_max",
            seed,
            check(&one(&x), |t, v| t.channel_max(v[0]), &c),
        );
        assert_ok(
            "channel_mean",
            seed,
            check(&one(&x), |t, v| t.channel_mean(v[0]), &c),
        );
        let m = randn(&[2, 1, 6, 6], &mut r);
        assert_ok(
            "repeat_channels",
            seed,
            check(&one(&m), |t, v| t.repeat_channels(v[0], 4), &c),
        );
        assert_ok(
            "narrow",
            seed,
            check(&one(&x), |t, v| t.narrow(v[0], 1, 1, 2), &c),
        );
        assert_ok(
            "reshape",
            seed,
            check(&one(&x), |t, v| t.reshape(v[0], &[6, 36]), &c),
        );
        assert_ok(
            "sum_last",
            seed,
            check(&one(&x), |t, v| t.sum_last(v[0]), &c),
        );
        let y = randn(&[2, 2, 6, 6], &mut r);
        assert_ok(
            "concat",
            seed,
            check(
                &[("x", x.clone()), ("y", y)],
                |t, v| t.concat(&[v[0], v[1]], 1),
                &c,
            ),
        );
    }
}

pub fn matmul_and_transpose() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let a = randn(&[2, 3, 4], &mut r);
        let b = randn(&[2, 4, 5], &mut r);
        assert_ok(
            "matmul",
            seed,
            check(
                &[("a", a.clone()), ("b", b)],
                |t, v| t.matmul(v[0], v[1]),
                &cfg(seed),
            ),
        );
        assert_ok(
            "transpose_last2",
            seed,
            check(&[("a", a)], |t, v| t.transpose_last2(v[0]), &cfg(seed)),
        );
    }
}

fn lgsf(seed: u64) -> (ParamStore<f64>, LgsfBlock, Tensor<f64>) {
    let mut store = ParamStore::new();
    let block = LgsfBlock::new(&mut store, "lgsf", 3, &mut init_rng(seed, 0));
    (store, block, randn(&[2, 3, 8, 8], &mut rng(seed)))
}

pub fn lgsf_local_block() {
    for seed in SEEDS {
        let (store, block, x) = lgsf(seed);
        let r = check_block(
            &store,
            &[("f", x)],
            Mode::Train,
            |ctx, v| block.local(ctx, v[0]),
            &cfg(seed),
        );
        assert_ok("lgsf_local", seed, r);
    }
}

pub fn lgsf_global_block() {
    for seed in SEEDS {
        let (store, block, x) = lgsf(seed);
        let r = check_block(
            &store,
            &[("f", x)],
            Mode::Train,
            |ctx, v| block.global(ctx, v[0]),
            &cfg(seed),
        );
        assert_ok("lgsf_global", seed, r);
    }
}

pub fn msfa_block() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let msfa = Msfa::new(&mut store, "msfa", [2, 3, 4], 4, &mut init_rng(seed, 0));
        let mut r = rng(seed);
        let inputs = [
            ("f2", randn(&[2, 2, 8, 8], &mut r)),
            ("f3", randn(&[2, 3, 4, 4], &mut r)),
            ("f4", randn(&[2, 4, 2, 2], &mut r)),
        ];
        let res = check_block(
            &store,
            &inputs,
            Mode::Train,
            |ctx, v| msfa.forward(ctx, v[0], v[1], v[2]),
            &cfg(seed),
        );
        assert_ok("msfa", seed, res);
    }
}

pub fn cross_layer_attention_block() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let ca = CrossLayerAttention::new(&mut store, "ca", 3, &mut init_rng(seed, 0));
        let mut r = rng(seed);
        let f1 = randn(&[2, 3, 8, 8], &mut r);
        let m = Tensor::rand_uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut r);
        let mut mask: Vec<bool> = (0..32).map(|_| r.gen_bool(0.4)).collect();
        mask[3] = true;
        mask[16..].iter_mut().for_each(|b| *b = false);
        let res = check_block(
            &store,
            &[("f1", f1), ("m", m)],
            Mode::Train,
            |ctx, v| Ok(ca.forward(ctx, v[0], v[1], &mask)?.output),
            &cfg(seed),
        );
        assert_ok("cross_layer_attention", seed, res);
    }
}

pub fn attention_gate_block() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let ag = AttentionGate::new(&mut store, "ag", 3, 2, 4, &mut init_rng(seed, 0));
        // Move psi off its zero initialization so every path carries gradient.
        let psi = store.find("ag.psi.weight").unwrap();
        store.param_mut(psi).value = Tensor::randn(&[1, 4, 1, 1], 0.5, &mut rng(seed + 100));
        let mut r = rng(seed);
        let inputs = [
            ("gating", randn(&[2, 2, 2, 2], &mut r)),
            ("skip", randn(&[2, 3, 4, 4], &mut r)),
        ];
        let res = check_block(
            &store,
            &inputs,
            Mode::Train,
            |ctx, v| Ok(ag.forward(ctx, v[0], v[1])?.output),
            &cfg(seed),
        );
        assert_ok("attention_gate", seed, res);
    }
}

pub fn weighted_bce_dice_loss() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let logits = randn(&[2, 1, 8, 8], &mut r);
        let gt = Tensor::new(
            &[2, 1, 8, 8],
            (0..128)
                .map(|_| if r.gen_bool(0.4) { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let loss_cfg = LossConfig {
            boundary_window: 5,
            ..Default::default()
        };
        let res = check(
            &[("logits", logits)],
            |t, v| {
                let p = t.sigmoid(v[0]);
                weighted_bce_dice(t, p, &gt, &loss_cfg)
            },
            &cfg(seed),
        );
        assert_ok("weighted_bce_dice", seed, res);
    }
}
