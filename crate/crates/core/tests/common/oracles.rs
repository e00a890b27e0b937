//! Independent references: direct nested-loop convolution and a per-pixel
//! scalar evaluation of the boundary-weighted BCE + Dice loss.

use polyp_ses::tensor::ConvGeometry;
use polyp_ses::training::{weighted_bce_dice, LossConfig};
use polyp_ses::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct definition: out[n,o,y,x] = b[o] + Σ_{c,i,j} w[o,c,i,j] · x[n, g·cin + c, y·s − p + i·d, x·s − p + j·d].
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], g: ConvGeometry) -> Tensor<f64> {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, cpg, k, _) = w.dims4().unwrap();
    let span = g.dilation * (k - 1) + 1;
    let oh = (h + 2 * g.padding - span) / g.stride + 1;
    let ow = (wd + 2 * g.padding - span) / g.stride + 1;
    let opg = cout / g.groups;
    assert_eq!(cpg * g.groups, cin);
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; n * cout * oh * ow];
    for bi in 0..n {
        for o in 0..cout {
            let grp = o / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for c in 0..cpg {
                        let ci = grp * cpg + c;
                        for i in 0..k {
                            for j in 0..k {
                                let iy =
                                    (oy * g.stride + i * g.dilation) as isize - g.padding as isize;
                                let ix =
                                    (ox * g.stride + j * g.dilation) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((bi * cin + ci) * h + iy as usize) * wd + ix as usize];
                                acc += wdat[((o * cpg + c) * k + i) * k + j] * xv;
                            }
                        }
                    }
                    out[((bi * cout + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

pub fn engine_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], g: ConvGeometry) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = tape.constant(Tensor::new(&[b.len()], b.to_vec()).unwrap());
    let y = tape.conv2d(xv, wv, Some(bv), g).unwrap();
    tape.value(y).clone()
}

/// Randomized sweep over dilations {1,2,4,8}, strides {1,2} and paddings
/// 0..=4. Returns the case count and the worst absolute error.
pub fn conv_sweep() -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cases = 0;
    let mut worst = 0.0f64;
    for dilation in [1usize, 2, 4, 8] {
        for stride in [1, 2] {
            for padding in 0..=4 {
                for _ in 0..6 {
                    let k: usize = [1, 3, 5][rng.gen_range(0..3)];
                    let span = dilation * (k - 1) + 1;
                    let groups = [1, 1, 2][rng.gen_range(0..3)];
                    let cin = groups * rng.gen_range(1..=3);
                    let cout = groups * rng.gen_range(1..=3);
                    let min_side = span.saturating_sub(2 * padding).max(1);
                    let h = rng.gen_range(min_side..min_side + 9);
                    let w = rng.gen_range(min_side..min_side + 9);
                    let n = rng.gen_range(1..=2);
                    let x = Tensor::randn(&[n, cin, h, w], 1.0, &mut rng);
                    let wt = Tensor::randn(&[cout, cin / groups, k, k], 1.0, &mut rng);
                    let b: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let g = ConvGeometry::new(stride, padding, dilation).grouped(groups);
                    let want = naive_conv(&x, &wt, &b, g);
                    let got = engine_conv(&x, &wt, &b, g);
                    assert_eq!(
                        got.shape(),
                        want.shape(),
                        "d{dilation} s{stride} p{padding} k{k}"
                    );
                    let err = got
                        .data()
                        .iter()
                        .zip(want.data())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    worst = worst.max(err);
                    cases += 1;
                }
            }
        }
    }
    (cases, worst)
}

/// Window mean over in-bounds pixels, by explicit enumeration.
pub fn pooled(gt: &[f64], h: usize, w: usize, k: usize, y: usize, x: usize) -> f64 {
    let r = (k / 2) as isize;
    let (mut sum, mut count) = (0.0, 0usize);
    for dy in -r..=r {
        for dx in -r..=r {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                sum += gt[yy as usize * w + xx as usize];
                count += 1;
            }
        }
    }
    sum / count as f64
}

fn reference_image(p: &[f64], g: &[f64], h: usize, w: usize, cfg: &LossConfig) -> f64 {
    let (mut bce_num, mut wsum, mut inter, mut wp, mut wg) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let weight = 1.0
                + cfg.boundary_factor * (pooled(g, h, w, cfg.boundary_window, y, x) - g[i]).abs();
            let pc = p[i].clamp(1e-7, 1.0 - 1e-7);
            bce_num += weight * -(g[i] * pc.ln() + (1.0 - g[i]) * (1.0 - pc).ln());
            wsum += weight;
            inter += weight * pc * g[i];
            wp += weight * pc;
            wg += weight * g[i];
        }
    }
    bce_num / wsum + 1.0 - (2.0 * inter + 1.0) / (wp + wg + 1.0)
}

pub fn reference(p: &Tensor<f64>, g: &Tensor<f64>, cfg: &LossConfig) -> f64 {
    let (n, _, h, w) = p.dims4().unwrap();
    let per = h * w;
    (0..n)
        .map(|b| {
            reference_image(
                &p.data()[b * per..(b + 1) * per],
                &g.data()[b * per..(b + 1) * per],
                h,
                w,
                cfg,
            )
        })
        .sum::<f64>()
        / n as f64
}

pub fn instance(rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, LossConfig) {
    let n = rng.gen_range(1..=2);
    let (h, w) = (8, 8);
    let mut g = vec![0.0; n * h * w];
    for b in 0..n {
        // Mix of blobs and scattered pixels.
        let (cy, cx, r) = (
            rng.gen_range(0.0..8.0),
            rng.gen_range(0.0..8.0),
            rng.gen_range(0.0..4.0),
        );
        for y in 0..h {
            for x in 0..w {
                let inside = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r;
                g[(b * h + y) * w + x] = if inside || rng.gen_bool(0.05) {
                    1.0
                } else {
                    0.0
                };
            }
        }
    }
    let p: Vec<f64> = (0..n * h * w)
        .map(|_| match rng.gen_range(0..20) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen_range(0.0..1.0),
        })
        .collect();
    let cfg = LossConfig {
        boundary_factor: [5.0, 5.0, 0.0, 2.5][rng.gen_range(0..4)],
        boundary_window: [31, 31, 3, 5, 7][rng.gen_range(0..5)],
    };
    (
        Tensor::new(&[n, 1, h, w], p).unwrap(),
        Tensor::new(&[n, 1, h, w], g).unwrap(),
        cfg,
    )
}

/// Engine loss against the reference on `count` random 8×8 instances.
/// Returns the worst absolute error in f64 and, away from the clamp
/// bounds (1 − 1e-7 rounds differently in f32), in f32.
pub fn loss_sweep(count: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for _ in 0..count {
        let (p, g, cfg) = instance(&mut rng);
        let want = reference(&p, &g, &cfg);
        let mut tape = Tape::<f64>::new();
        let pv = tape.leaf(p.clone(), true);
        let l = weighted_bce_dice(&mut tape, pv, &g, &cfg).unwrap();
        worst64 = worst64.max((tape.value(l).data()[0] - want).abs());

        let inner = p.map(|v| v.clamp(1e-3, 1.0 - 1e-3));
        let want_inner = reference(&inner, &g, &cfg);
        let mut tape = Tape::<f32>::new();
        let pv = tape.leaf(inner.cast(), true);
        let l = weighted_bce_dice(&mut tape, pv, &g.cast(), &cfg).unwrap();
        worst32 = worst32.max((f64::from(tape.value(l).data()[0]) - want_inner).abs());
    }
    (worst64, worst32)
}
