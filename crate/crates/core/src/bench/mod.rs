//! Accuracy evaluation, the strategy benchmark matrix and its reports.

mod accuracy;
mod report;
mod strategy;

pub use accuracy::{accuracy_from_logits, evaluate_accuracy, predict_set, DEFAULT_THRESHOLD};
pub use report::{
    emit_loss_curve, emit_tables, parse_tables_csv, render_loss_csv, render_loss_svg, write_report, TableRow, Tables,
};
pub use strategy::{
    run_bench, run_strategy_matrix, time_preprocessing, BenchConfig, BenchReport, PreprocessTiming, Strategy,
    StrategyReport,
};

use thiserror::Error;

use crate::dataset::DatasetError;
use crate::imaging::ImagingError;
use crate::nn::NnError;
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("accuracy of an empty set is undefined")]
    EmptySet,
    #[error("{0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
