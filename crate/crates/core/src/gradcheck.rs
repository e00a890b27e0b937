//! Central finite-difference verification of tape gradients in `f64`.
//!
//! The output of the function under test is projected onto a fixed random
//! tensor to form a scalar. Coordinates whose `±h` evaluations cross a
//! non-differentiable point (a ReLU sign, clamp boundary or channel argmax
//! change, as reported by the tape's kink signature) are skipped.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Ctx, Mode, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates probed per input tensor; smaller tensors are probed fully.
    pub coords_per_input: usize,
    pub seed: u64,
    /// Lower bound on the error denominator, so identically zero gradients
    /// are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_input: 16,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub name: String,
    /// `max|a − n| / max(max|a|, max|n|, floor)` over probed coordinates.
    pub rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|c| c.checked).sum()
    }
}

struct Eval {
    loss: f64,
    kinks: Option<u64>,
    grads: Vec<Tensor<f64>>,
}

fn evaluate<F>(
    f: &mut F,
    inputs: &[Tensor<f64>],
    proj: Option<&Tensor<f64>>,
    with_grad: bool,
) -> Result<(Eval, Tensor<f64>)>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_kink_tracking();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), with_grad))
        .collect();
    let out = f(&mut tape, &vars)?;
    let out_val = tape.value(out).clone();
    let kinks = tape.kink_signature();
    let (loss, grads) = match proj {
        None => (0.0, Vec::new()),
        Some(r) => {
            let rv = tape.constant(r.clone());
            let prod = tape.mul(out, rv)?;
            let loss = tape.sum(prod);
            let value = tape.value(loss).data()[0];
            let grads = if with_grad {
                tape.backward(loss)?;
                vars.iter()
                    .zip(inputs)
                    .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                    .collect()
            } else {
                Vec::new()
            };
            (value, grads)
        }
    };
    Ok((Eval { loss, kinks, grads }, out_val))
}

/// Checks the gradient of `f` with respect to every named input.
pub fn check<F>(
    inputs: &[(&str, Tensor<f64>)],
    mut f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (_, out) = evaluate(&mut f, &values, None, false)?;
    let proj = Tensor::randn(out.shape(), 1.0, &mut rng);
    let (base, _) = evaluate(&mut f, &values, Some(&proj), true)?;

    let mut report = GradCheckReport { inputs: Vec::new() };
    for (k, (name, t)) in inputs.iter().enumerate() {
        let n = t.len();
        let coords: Vec<usize> = if n <= cfg.coords_per_input {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.coords_per_input).into_vec()
        };
        let (mut max_diff, mut max_a, mut max_n) = (0.0f64, 0.0f64, 0.0f64);
        let (mut checked, mut skipped) = (0, 0);
        for i in coords {
            let mut probe = |delta: f64| -> Result<Eval> {
                let mut vals = values.clone();
                vals[k].data_mut()[i] += delta;
                Ok(evaluate(&mut f, &vals, Some(&proj), false)?.0)
            };
            let plus = probe(cfg.step)?;
            let minus = probe(-cfg.step)?;
            if plus.kinks != base.kinks || minus.kinks != base.kinks {
                skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * cfg.step);
            let analytic = base.grads[k].data()[i];
            max_diff = max_diff.max((analytic - numeric).abs());
            max_a = max_a.max(analytic.abs());
            max_n = max_n.max(numeric.abs());
            checked += 1;
        }
        let rel_err = max_diff / max_a.max(max_n).max(cfg.floor);
        report.inputs.push(InputCheck {
            name: name.to_string(),
            rel_err,
            checked,
            skipped,
        });
    }
    if report.checked() == 0 {
        return Err(Error::Contract(
            "every probed coordinate crossed a kink".into(),
        ));
    }
    Ok(report)
}

/// Checks a parameterized block: gradients flow to the inputs and to every
/// parameter in `store`, which the block reads through a [`Ctx`].
pub fn check_block<F>(
    store: &ParamStore<f64>,
    inputs: &[(&str, Tensor<f64>)],
    mode: Mode,
    mut block: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.params().iter().map(|p| p.name.clone()).collect();
    let mut all: Vec<(&str, Tensor<f64>)> = inputs.to_vec();
    for p in store.params() {
        all.push((p.name.as_str(), p.value.clone()));
    }
    let n_in = inputs.len();
    check(
        &all,
        |tape, vars| {
            let mut scratch = store.clone();
            let mut ctx = Ctx::new(tape, &mut scratch, mode);
            for (j, name) in names.iter().enumerate() {
                let id = ctx.store.find(name).expect("parameter registered");
                ctx.bind(id, vars[n_in + j])?;
            }
            block(&mut ctx, &vars[..n_in])
        },
        cfg,
    )
}
