//! Loss, optimizer, schedule, mixed precision emulation and the epoch loop.

mod adam;
mod config;
mod loss;
mod precision;
mod run;
mod schedule;
mod step;
mod timing;

pub use adam::{adam_step, AdamState};
pub use config::{parse_kv_lines, Precision, Scheduler, TrainConfig, Transport};
pub use loss::{bce_value, bce_with_logits};
pub use precision::{quantize_binary16, LossScaler, MIN_LOSS_SCALE};
pub use run::{render_training_log, train_run, EpochStats, TrainAborted};
pub use schedule::scheduler_lr;
pub use step::{
    compute_gradients, full_precision_step, mixed_precision_step, mixed_precision_update,
    GradMap, MixedStep, StepGradients,
};
pub use timing::{fixed2, render_minutes, timed_execution, Mark};

use thiserror::Error;

use crate::dataset::DatasetError;
use crate::nn::NnError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite gradient in {param}")]
    NonFiniteGradient { param: String },
    #[error("persistent overflow: loss scale fell to {scale:e}")]
    PersistentOverflow { scale: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("gradient/parameter mismatch for {0}")]
    Mismatch(String),
    #[error(transparent)]
    Parallel(Box<crate::parallel::ParallelError>),
}

impl From<crate::parallel::ParallelError> for TrainError {
    fn from(e: crate::parallel::ParallelError) -> Self {
        TrainError::Parallel(Box::new(e))
    }
}
