//! Multi-label image classification training engine with a benchmark
//! harness for comparing training strategies.

mod fsutil;
pub mod bench;
pub mod cli;
pub mod dataset;
pub mod imaging;
pub mod nn;
pub mod parallel;
pub mod tensor;
pub mod trainer;
