//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::checkpoint::TensorArchive;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// One AdamW update of a flat parameter slice at step `t` (1-based): the
/// decay `p -= lr·wd·p` first, then the bias-corrected Adam step.
pub fn adamw_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    cfg: &AdamWConfig,
    lr: f64,
    t: u64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || m.len() != n || v.len() != n {
        return Err(Error::Shape(format!(
            "adamw: {n} params, {} grads, {} / {} moments",
            grads.len(),
            m.len(),
            v.len()
        )));
    }
    if t == 0 {
        return Err(Error::Contract("adamw step index starts at 1".into()));
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powf(t as f64));
    let c2 = T::of(1.0 - cfg.beta2.powf(t as f64));
    let (lr_t, decay, eps) = (T::of(lr), T::of(lr * cfg.weight_decay), T::of(cfg.eps));
    for i in 0..n {
        let g = grads[i];
        params[i] = params[i] - decay * params[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] = params[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Optimizer state aligned with a [`ParamStore`]'s parameter order.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Updates completed so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies the stored gradients of `store` at learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if store.params().len() != self.m.len() {
            return Err(Error::Contract(
                "optimizer state does not match the parameter set".into(),
            ));
        }
        self.step += 1;
        for ((p, m), v) in store
            .params_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            adamw_step(
                p.value.data_mut(),
                p.grad.data(),
                m.data_mut(),
                v.data_mut(),
                &self.config,
                lr,
                self.step,
            )?;
        }
        Ok(())
    }

    pub fn append_to(&self, store: &ParamStore<T>, a: &mut TensorArchive) -> Result<()> {
        for (p, m) in store.params().iter().zip(&self.m) {
            a.push(format!("optim.m.{}", p.name), m.cast())?;
        }
        for (p, v) in store.params().iter().zip(&self.v) {
            a.push(format!("optim.v.{}", p.name), v.cast())?;
        }
        Ok(())
    }

    /// Restores moments for every parameter of `store`; `step` comes from
    /// the caller's metadata.
    pub fn load(
        store: &ParamStore<T>,
        config: AdamWConfig,
        step: u64,
        a: &TensorArchive,
    ) -> Result<Self> {
        let fetch = |prefix: &str| {
            store
                .params()
                .iter()
                .map(|p| {
                    let name = format!("{prefix}{}", p.name);
                    match a.get(&name) {
                        Some(t) if t.shape() == p.value.shape() => Ok(t.cast()),
                        Some(t) => Err(Error::Checkpoint(format!(
                            "tensor {name} has shape {:?}, expected {:?}",
                            t.shape(),
                            p.value.shape()
                        ))),
                        None => Err(Error::Checkpoint(format!(
                            "tensor {name} missing from checkpoint"
                        ))),
                    }
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            config,
            step,
            m: fetch("optim.m.")?,
            v: fetch("optim.v.")?,
        })
    }
}
