//! Polyp segmentation with local-to-global spatial fusion and
//! self-enriched semantics, on a small deterministic tensor engine with
//! reverse-mode differentiation.

pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod ses;
pub mod tensor;
pub mod training;

pub use dataset::SegSample;
pub use error::{Error, Result};
pub use metrics::{EvalReport, Predictor};
pub use model::{AblationFlags, ModelConfig, PolypSes};
pub use tensor::{Real, Tape, Tensor, Var};
pub use training::{TrainConfig, Trainer};
