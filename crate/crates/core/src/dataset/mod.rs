//! Sample metadata, label encoding, splitting, batching and sharding.

mod batching;
mod labels;
mod metadata;
mod set;
mod split;
pub mod synthetic;

pub use batching::{batch_indices, make_batches, shard};
pub use labels::{class_index, LabelVector, CLASS_NAMES};
pub use metadata::{parse_metadata, render_metadata, SampleRecord};
pub use set::{Batch, LabeledSet};
pub use split::{split_by_patient, SplitFractions};

pub use crate::imaging::Split;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("metadata parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown class {class:?} on line {line}")]
    Vocabulary { line: usize, class: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Imaging(#[from] crate::imaging::ImagingError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}
