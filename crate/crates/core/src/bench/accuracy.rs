use crate::dataset::LabeledSet;
use crate::nn::{MicroResNet, Mode, NUM_CLASSES};
use crate::tensor::kernels::sigmoid;
use crate::tensor::Tensor;

use super::BenchError;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Fraction of correct label predictions over `N * classes` entries.
///
/// `probabilities` and `truth` are row-major `[N, classes]`. A label is
/// predicted positive only when its probability is strictly above
/// `threshold`.
pub fn evaluate_accuracy(
    probabilities: &[f64],
    truth: &[f64],
    classes: usize,
    threshold: f64,
) -> Result<f64, BenchError> {
    if classes == 0 {
        return Err(BenchError::Invalid("need at least one class".into()));
    }
    if probabilities.len() != truth.len() || !probabilities.len().is_multiple_of(classes) {
        return Err(BenchError::Invalid(format!(
            "{} predictions and {} labels do not form [N, {classes}] pairs",
            probabilities.len(),
            truth.len()
        )));
    }
    if probabilities.is_empty() {
        return Err(BenchError::EmptySet);
    }
    let mut correct = 0usize;
    for (&p, &y) in probabilities.iter().zip(truth) {
        let actual = match y {
            v if v == 0.0 => false,
            v if v == 1.0 => true,
            v => return Err(BenchError::Invalid(format!("truth must be 0 or 1, found {v}"))),
        };
        if (p > threshold) == actual {
            correct += 1;
        }
    }
    Ok(correct as f64 / probabilities.len() as f64)
}

/// [`evaluate_accuracy`] after a sigmoid.
pub fn accuracy_from_logits(logits: &Tensor, truth: &Tensor, threshold: f64) -> Result<f64, BenchError> {
    if logits.shape() != truth.shape() || logits.shape().len() != 2 {
        return Err(BenchError::Invalid(format!(
            "logits {:?} and truth {:?} must be equal [N, C] shapes",
            logits.shape(),
            truth.shape()
        )));
    }
    let probs: Vec<f64> = logits.data().iter().map(|&x| sigmoid(x)).collect();
    evaluate_accuracy(&probs, truth.data(), logits.shape()[1], threshold)
}

/// Eval-mode logits `[N, 14]` and the matching truth for a whole set.
pub fn predict_set(model: &MicroResNet, data: &LabeledSet, batch_size: usize) -> Result<(Tensor, Tensor), BenchError> {
    if data.is_empty() {
        return Err(BenchError::EmptySet);
    }
    let mut model = model.clone();
    model.set_mode(Mode::Eval);
    let mut logits = Vec::with_capacity(data.len() * NUM_CLASSES);
    let mut truth = Vec::with_capacity(data.len() * NUM_CLASSES);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        logits.extend_from_slice(model.predict(&batch.images)?.data());
        truth.extend_from_slice(batch.labels.data());
    }
    let shape = vec![data.len(), NUM_CLASSES];
    Ok((
        Tensor::new(shape.clone(), logits).map_err(crate::nn::NnError::from)?,
        Tensor::new(shape, truth).map_err(crate::nn::NnError::from)?,
    ))
}
