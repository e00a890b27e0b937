//! Whole-network contracts: shapes, value ranges, gradient flow, ablations,
//! and the self-enrichment module's worked examples.

use std::time::Instant;

use polyp_ses::encoder::build_encoder;
use polyp_ses::gradcheck::{check_block, GradCheckConfig};
use polyp_ses::params::{init_rng, Ctx, Mode, ParamStore};
use polyp_ses::ses::{AttentionGate, CrossLayerAttention};
use polyp_ses::training::{weighted_bce_dice, LossConfig};
use polyp_ses::{ModelConfig, PolypSes, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    Tensor::rand_uniform(
        &[n, 3, h, w],
        0.0,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

fn in_unit(t: &Tensor<f32>) -> bool {
    t.data().iter().all(|v| (0.0..=1.0).contains(v))
}

#[test]
fn full_scale_contract_at_352() {
    let start = Instant::now();
    let mut model = PolypSes::<f32>::new(ModelConfig::full_scale(), 0).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(image(1, 352, 352, 1));
    let (out, _) = model.forward(&mut tape, x, Mode::Eval).unwrap();
    let elapsed = start.elapsed();
    let shapes = out.pyramid.shapes(&tape);
    assert_eq!(shapes[0], [1, 64, 88, 88]);
    assert_eq!(shapes[1], [1, 128, 44, 44]);
    assert_eq!(shapes[2], [1, 320, 22, 22]);
    assert_eq!(shapes[3], [1, 512, 11, 11]);
    let ses = out.ses.as_ref().unwrap();
    for v in [out.decoder.m_initial, ses.m1, ses.m2, ses.m] {
        assert_eq!(tape.shape(v), [1, 1, 44, 44]);
        assert!(in_unit(tape.value(v)));
    }
    assert!(elapsed.as_secs_f64() < 10.0, "{elapsed:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn pyramid_contract_for_any_multiple_of_32(hm in 1usize..=4, wm in 1usize..=4, batch in 1usize..=2) {
        let (h, w) = (32 * hm, 32 * wm);
        let mut cfg = ModelConfig::desk();
        cfg.encoder.input_size = (h, w);
        cfg.partition.patch_size = 1;
        let mut model = PolypSes::<f32>::new(cfg.clone(), 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(image(batch, h, w, 2));
        let (out, _) = model.forward(&mut tape, x, Mode::Train).unwrap();
        let s = out.pyramid.shapes(&tape);
        for (i, shape) in s.iter().enumerate() {
            let f = 1 << (i + 2);
            prop_assert_eq!(shape.clone(), vec![batch, cfg.encoder.stage_channels[i], h / f, w / f]);
        }
        prop_assert!(s[0][2] > s[1][2] && s[1][2] > s[2][2] && s[2][2] > s[3][2]);
        for (i, &r) in out.decoder.refined.iter().enumerate() {
            prop_assert_eq!(tape.shape(r), s[i + 1].as_slice());
        }
        for v in out.supervised_maps() {
            prop_assert_eq!(tape.shape(v), [batch, 1, h / 8, w / 8]);
            prop_assert!(in_unit(tape.value(v)));
        }
    }
}

#[test]
fn every_encoder_parameter_receives_gradient() {
    let cfg = ModelConfig::desk().encoder;
    let (encoder, mut store) = build_encoder::<f64>(&cfg, 5).unwrap();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Train);
    let x = ctx.tape.constant(image(2, 64, 64, 9).cast());
    let pyr = encoder.extract_features(&mut ctx, x).unwrap();
    let bindings = ctx.into_bindings();
    let proj = tape.constant(Tensor::randn(
        tape.shape(pyr.level(4)),
        1.0,
        &mut ChaCha8Rng::seed_from_u64(1),
    ));
    let prod = tape.mul(pyr.level(4), proj).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    store.collect_grads(&tape, &bindings);
    for p in store.params() {
        assert!(
            p.grad.data().iter().any(|&g| g != 0.0),
            "{} has no gradient",
            p.name
        );
    }
}

#[test]
fn without_ses_the_output_is_m_initial() {
    let mut full = PolypSes::<f32>::new(ModelConfig::desk(), 11).unwrap();
    let mut cfg = ModelConfig::desk();
    cfg.ablation.disable_ses = true;
    let mut bare = PolypSes::<f32>::new(cfg, 11).unwrap();
    let x = image(2, 64, 64, 4);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (out, _) = full.forward(&mut tape, xv, Mode::Eval).unwrap();
    let m_initial = tape.value(out.decoder.m_initial).clone();

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (out_bare, _) = bare.forward(&mut tape, xv, Mode::Eval).unwrap();
    assert!(out_bare.ses.is_none());
    assert_eq!(out_bare.supervised_maps().len(), 1);
    assert_eq!(tape.value(out_bare.prediction()), &m_initial);
    assert_eq!(bare.predict(&x).unwrap(), m_initial);
}

#[test]
fn without_lgsf_each_level_is_a_plain_conv() {
    let mut cfg = ModelConfig::desk();
    cfg.ablation.disable_lgsf = true;
    let mut model = PolypSes::<f32>::new(cfg, 2).unwrap();
    let names: Vec<&str> = model
        .store()
        .params()
        .iter()
        .map(|p| p.name.as_str())
        .collect();
    assert!(!names.iter().any(|n| n.contains("lgsf")));
    for level in 2..=4 {
        let w = model
            .store()
            .find(&format!("decoder.plain{level}.weight"))
            .unwrap();
        let c = ModelConfig::desk().encoder.stage_channels[level - 1];
        assert_eq!(model.store().param(w).value.shape(), [c, c, 3, 3]);
    }
    let mut tape = Tape::new();
    let x = tape.constant(image(1, 64, 64, 0));
    let (out, _) = model.forward(&mut tape, x, Mode::Eval).unwrap();
    for (i, &r) in out.decoder.refined.iter().enumerate() {
        assert_eq!(tape.shape(r), tape.shape(out.pyramid.level(i + 2)));
    }
}

#[test]
fn end_to_end_gradient_check_on_toy_config() {
    let mut cfg = ModelConfig::desk();
    cfg.encoder.input_size = (64, 64);
    cfg.encoder.stage_channels = [4, 8, 12, 16];
    cfg.msfa_channels = 4;
    cfg.partition.patch_size = 2;
    let model = PolypSes::<f64>::new(cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::rand_uniform(&[2, 3, 64, 64], 0.0, 1.0, &mut rng);
    let gt = Tensor::new(
        &[2, 1, 8, 8],
        (0..128)
            .map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap();
    let loss_cfg = LossConfig {
        boundary_factor: 5.0,
        boundary_window: 3,
    };
    let gc = GradCheckConfig {
        coords_per_input: 2,
        seed: 8,
        ..GradCheckConfig::default()
    };
    let report = check_block(
        model.store(),
        &[("image", x)],
        Mode::Train,
        |ctx, v| {
            let out = model.forward_in(ctx, v[0])?;
            let mut total = None;
            for m in out.supervised_maps() {
                let l = weighted_bce_dice(ctx.tape, m, &gt, &loss_cfg)?;
                total = Some(match total {
                    None => l,
                    Some(t) => ctx.tape.add(t, l)?,
                });
            }
            Ok(total.expect("four maps"))
        },
        &gc,
    )
    .unwrap();
    let worst = report
        .inputs
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .unwrap();
    assert!(
        report.max_rel_err() < 1e-4,
        "{} rel err {:e}",
        worst.name,
        worst.rel_err
    );
    assert!(report.checked() > report.inputs.len());
}

#[test]
fn equal_keys_share_attention_evenly() {
    let mut store = ParamStore::<f64>::new();
    let ca = CrossLayerAttention::new(&mut store, "ca", 1, &mut init_rng(3, 0));
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Eval);
    // Constant F1 and map give identical key vectors at every position.
    let f1 = ctx.tape.constant(Tensor::full(&[1, 1, 4, 4], 0.7));
    let m = ctx.tape.constant(Tensor::full(&[1, 1, 2, 2], 0.4));
    let two = ca
        .forward(&mut ctx, f1, m, &[true, false, false, true])
        .unwrap();
    let one = ca
        .forward(&mut ctx, f1, m, &[false, false, true, false])
        .unwrap();
    let (w2, w1) = (tape.value(two.weights), tape.value(one.weights));
    assert_eq!(w2.shape(), [1, 4, 4]);
    for q in 0..4 {
        assert_eq!(&w2.data()[q * 4..q * 4 + 4], &[0.5, 0.0, 0.0, 0.5]);
        assert_eq!(&w1.data()[q * 4..q * 4 + 4], &[0.0, 0.0, 1.0, 0.0]);
    }
}

#[test]
fn zero_inputs_open_the_gate_halfway() {
    let mut store = ParamStore::<f64>::new();
    let ag = AttentionGate::new(&mut store, "ag", 3, 2, 2, &mut init_rng(0, 0));
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Eval);
    let g = ctx.tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let s = ctx.tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let out = ag.forward(&mut ctx, g, s).unwrap();
    assert!(tape.value(out.alpha).data().iter().all(|&a| a == 0.5));
    assert!(tape.value(out.output).data().iter().all(|&v| v == 0.0));
    assert_eq!(tape.shape(out.output), [1, 3, 4, 4]);
}

#[test]
fn empty_partitions_still_give_a_valid_map() {
    let mut model = PolypSes::<f32>::new(ModelConfig::desk(), 6).unwrap();
    let ses = model.ses().unwrap().clone();
    let encoder = model.encoder().clone();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, model.store_mut(), Mode::Eval);
    let x = ctx.tape.constant(image(1, 64, 64, 3));
    let pyr = encoder.extract_features(&mut ctx, x).unwrap();
    let zero = ctx.tape.constant(Tensor::zeros(&[1, 1, 8, 8]));
    let out = ses.enrich_and_decode(&mut ctx, &pyr, zero).unwrap();
    assert!(!out.partition.s1_mask.iter().any(|&m| m) && !out.partition.s2_mask.iter().any(|&m| m));
    for q in out.queries {
        assert!(tape.value(q).data().iter().all(|&v| v == 0.0));
    }
    for v in [out.m1, out.m2, out.m] {
        assert!(tape.value(v).all_finite() && in_unit(tape.value(v)));
    }
}
