//! Synchronous data parallel training: K replicas, one reducer, and a byte
//! protocol for the gradients that pass between them.

mod control;
mod group;
mod reduce;
mod wire;

pub use group::{serve_worker, train_data_parallel, Fault, FaultKind, GroupOptions, StepOutcome, WorkerGroup};
pub use reduce::{allreduce_mean, flatten_grads, unflatten_grads};
pub use wire::{read_frame, write_frame, GradMessage, MAGIC, REDUCER_ID, VERSION};

use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParallelError {
    #[error("protocol error at byte {offset}: {message}")]
    Protocol { offset: usize, message: String },
    #[error("protocol error: {0}")]
    Mismatch(String),
    #[error("synchronization timeout after {waited:?}: no message from worker(s) {missing:?}")]
    Timeout { missing: Vec<u32>, waited: Duration },
    #[error("worker {worker} failed: {message}")]
    WorkerFailed { worker: u32, message: String },
    #[error("worker group disconnected: {0}")]
    Disconnected(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
