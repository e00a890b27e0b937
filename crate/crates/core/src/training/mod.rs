//! Loss, optimizer, configuration and the training loop.

pub mod config;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use config::TrainConfig;
pub use loss::{boundary_weights, weighted_bce_dice, LossConfig};
pub use optim::{adamw_step, AdamW, AdamWConfig};
pub use trainer::{epoch_order, history_csv, EpochRecord, StepReport, Trainer, HISTORY_HEADER};
