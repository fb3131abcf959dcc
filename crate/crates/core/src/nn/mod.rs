//! Layers and the micro residual network used as the classifier.

mod batchnorm;
pub mod checkpoint;
mod params;
mod resnet;

pub use batchnorm::{batchnorm_forward, BatchNormState, BN_EPS, BN_MOMENTUM};
pub use params::{Mode, ParamSet};
pub use resnet::{
    residual_forward, BlockNodes, BlockSpec, Forward, MicroResNet, MicroResNetConfig, NUM_CLASSES,
};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dimension error: expected input side {expected}, got {actual}")]
    InputSide { expected: usize, actual: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint format error at byte {offset}: {message}")]
    Checkpoint { offset: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
