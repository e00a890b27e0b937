//! Boundary-weighted BCE + Dice loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::tape::avg_pool_dims;
use crate::tensor::{kernels, Real, Tape, Tensor, Var};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Multiplier on `|avgpool(gt) - gt|` in the pixel weight.
    pub boundary_factor: f64,
    /// Side of the averaging window; odd.
    pub boundary_window: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            boundary_factor: 5.0,
            boundary_window: 31,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.boundary_window.is_multiple_of(2) || !(self.boundary_factor >= 0.0) {
            return Err(Error::config(format!(
                "boundary window must be odd and factor nonnegative, got {} and {}",
                self.boundary_window, self.boundary_factor
            )));
        }
        Ok(())
    }
}

/// `w = 1 + factor · |avgpool(gt) − gt|`, stride 1, same-size output. The
/// average counts only in-bounds pixels.
pub fn boundary_weights<T: Real>(gt: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    let (n, c, h, w) = gt.dims4()?;
    let k = cfg.boundary_window;
    let dims = avg_pool_dims(h, w, k, 1, k / 2, false)?;
    let mut pooled = vec![T::zero(); gt.len()];
    kernels::avg_pool_forward(gt.data(), &mut pooled, n * c, &dims);
    let f = T::of(cfg.boundary_factor);
    let data = pooled
        .iter()
        .zip(gt.data())
        .map(|(&a, &g)| T::one() + f * (a - g).abs())
        .collect();
    Tensor::new(gt.shape(), data)
}

fn check_binary<T: Real>(gt: &Tensor<T>) -> Result<()> {
    if gt.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::contract("ground truth must be a {0, 1} mask"));
    }
    Ok(())
}

/// Weighted BCE plus weighted Dice, each computed per image and averaged
/// over the batch. `pred` is a probability map, clamped to
/// `[1e-7, 1 − 1e-7]` before the logarithms.
pub fn weighted_bce_dice<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape != gt.shape() {
        return Err(Error::shape(format!(
            "prediction {shape:?} vs ground truth {:?}",
            gt.shape()
        )));
    }
    let (n, c, h, w) = gt.dims4()?;
    check_binary(gt)?;
    let weights = boundary_weights(gt, cfg)?;
    let per = c * h * w;
    let flat = [n, per];

    let wt = weights.clone().reshape(&flat)?;
    let w_sum: Vec<T> = wt
        .data()
        .chunks_exact(per)
        .map(|r| r.iter().copied().sum())
        .collect();
    let wg = Tensor::new(
        &flat,
        wt.data()
            .iter()
            .zip(gt.data())
            .map(|(&a, &b)| a * b)
            .collect(),
    )?;
    let w_not_g = Tensor::new(
        &flat,
        wt.data()
            .iter()
            .zip(gt.data())
            .map(|(&a, &b)| a * (T::one() - b))
            .collect(),
    )?;
    let wg_sum: Vec<T> = wg
        .data()
        .chunks_exact(per)
        .map(|r| r.iter().copied().sum())
        .collect();

    let p = tape.reshape(pred, &flat)?;
    let p = tape.clamp(p, T::of(PROB_EPS), T::of(1.0 - PROB_EPS));
    let log_p = tape.log(p)?;
    let q = tape.scale(p, -T::one());
    let q = tape.add_scalar(q, T::one());
    let log_q = tape.log(q)?;

    // wBCE_i = -Σ (w·g·ln p + w·(1−g)·ln(1−p)) / Σ w
    let wg_v = tape.constant(wg);
    let wng_v = tape.constant(w_not_g);
    let a = tape.mul(log_p, wg_v)?;
    let b = tape.mul(log_q, wng_v)?;
    let ll = tape.add(a, b)?;
    let ll = tape.sum_last(ll)?;
    let w_sum_v = tape.constant(Tensor::new(&[n], w_sum.iter().map(|&s| -s).collect())?);
    let wbce = tape.div(ll, w_sum_v)?;

    // wDice_i = 1 − (2·Σ w·p·g + 1) / (Σ w·p + Σ w·g + 1)
    let wv = tape.constant(wt);
    let wp = tape.mul(p, wv)?;
    let wp_sum = tape.sum_last(wp)?;
    let inter = tape.mul(p, wg_v)?;
    let inter = tape.sum_last(inter)?;
    let num = tape.scale(inter, T::of(2.0));
    let num = tape.add_scalar(num, T::one());
    let den_const = tape.constant(Tensor::new(
        &[n],
        wg_sum.iter().map(|&s| s + T::one()).collect(),
    )?);
    let den = tape.add(wp_sum, den_const)?;
    let ratio = tape.div(num, den)?;
    let dice = tape.scale(ratio, -T::one());
    let dice = tape.add_scalar(dice, T::one());

    let per_image = tape.add(wbce, dice)?;
    let total = tape.sum(per_image);
    Ok(tape.scale(total, T::of(1.0 / n as f64)))
}
