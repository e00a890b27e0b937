use serde::{Deserialize, Serialize};

use super::loss::LossConfig;
use super::optim::AdamWConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// `(height, width)` fed to the network; must match the model.
    pub image_size: (usize, usize),
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    /// Multiplier applied to the learning rate every `decay_epoch` epochs.
    pub lr_decay_rate: f64,
    pub decay_epoch: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Loss weights for `M_initial, M1, M2, M`.
    pub supervision_weights: [f64; 4],
    pub loss: LossConfig,
    /// Binarization threshold for the per-epoch metrics.
    pub threshold: f64,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<u64>,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            image_size: (352, 352),
            batch_size: 16,
            epochs: 200,
            base_lr: 1e-4,
            lr_decay_rate: 1e-1,
            decay_epoch: 50,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            supervision_weights: [1.0; 4],
            loss: LossConfig::default(),
            threshold: 0.5,
            max_steps: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            image_size: (64, 64),
            batch_size: 2,
            epochs: 50,
            ..Self::default()
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate in effect during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.lr_decay_rate.powi((epoch / self.decay_epoch) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_lr", self.base_lr),
            ("lr_decay_rate", self.lr_decay_rate),
            ("weight_decay", self.weight_decay),
            ("adam_eps", self.adam_eps),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config(format!("{name} must be positive, got {v}")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.decay_epoch == 0 {
            return Err(Error::config(
                "batch_size, epochs and decay_epoch must be at least 1",
            ));
        }
        let w = &self.supervision_weights;
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || !w.iter().any(|&x| x > 0.0) {
            return Err(Error::config(format!(
                "supervision weights {w:?} must be nonnegative with one positive"
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!(
                "threshold {} must lie in (0, 1)",
                self.threshold
            )));
        }
        self.loss.validate()
    }
}
