use std::collections::BTreeMap;

use crate::dataset::Batch;
use crate::nn::MicroResNet;
use crate::tensor::{BatchStats, Tensor};

use super::{adam_step, AdamState, LossScaler, TrainError};

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Result of one forward/backward pass over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients {
    /// Unscaled mean loss of the batch.
    pub loss: f64,
    /// Gradients of `loss * loss_scale`.
    pub grads: GradMap,
    /// Normalization statistics observed in train mode.
    pub batch_stats: BTreeMap<String, BatchStats>,
    pub batch_size: usize,
}

/// Forward, loss and backward without touching the model.
pub fn compute_gradients(
    model: &MicroResNet,
    batch: &Batch,
    mixed: bool,
    loss_scale: f64,
) -> Result<StepGradients, TrainError> {
    let mut fwd = model.forward(&batch.images, mixed)?;
    let loss = fwd.tape.bce_with_logits(fwd.logits, &batch.labels)?;
    let value = fwd.tape.value(loss).item().expect("scalar loss");
    let grads = if loss_scale == 1.0 {
        fwd.tape.backward(loss)?
    } else {
        let scaled = fwd.tape.scale(loss, loss_scale);
        fwd.tape.backward(scaled)?
    };
    Ok(StepGradients {
        loss: value,
        grads: fwd.named_gradients(&grads),
        batch_stats: std::mem::take(&mut fwd.batch_stats),
        batch_size: batch.len(),
    })
}

pub fn full_precision_step(
    model: &mut MicroResNet,
    batch: &Batch,
    adam: &mut AdamState,
    lr: f64,
) -> Result<f64, TrainError> {
    let step = compute_gradients(model, batch, false, 1.0)?;
    adam_step(model.params_mut(), &step.grads, adam, lr)?;
    model.apply_batch_stats(&step.batch_stats);
    Ok(step.loss)
}

/// Unscale gradients produced with `scaler.scale()`, then either apply Adam
/// or skip the step on overflow. Returns whether the update was applied.
pub fn mixed_precision_update(
    params: &mut crate::nn::ParamSet,
    scaled_grads: &GradMap,
    adam: &mut AdamState,
    scaler: &mut LossScaler,
    lr: f64,
) -> Result<bool, TrainError> {
    let scale = scaler.scale();
    let mut grads = GradMap::new();
    let mut overflow = false;
    for (name, g) in scaled_grads {
        let data: Vec<f64> = g.data().iter().map(|v| v / scale).collect();
        overflow |= data.iter().any(|v| !v.is_finite());
        grads.insert(name.clone(), Tensor::new(g.shape().to_vec(), data)?);
    }
    scaler.update(overflow)?;
    if overflow {
        return Ok(false);
    }
    adam_step(params, &grads, adam, lr)?;
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedStep {
    pub loss: f64,
    pub applied: bool,
    /// Scale the gradients were computed with.
    pub scale: f64,
}

pub fn mixed_precision_step(
    model: &mut MicroResNet,
    batch: &Batch,
    adam: &mut AdamState,
    scaler: &mut LossScaler,
    lr: f64,
) -> Result<MixedStep, TrainError> {
    let scale = scaler.scale();
    let step = compute_gradients(model, batch, true, scale)?;
    let applied = mixed_precision_update(model.params_mut(), &step.grads, adam, scaler, lr)?;
    model.apply_batch_stats(&step.batch_stats);
    Ok(MixedStep {
        loss: step.loss,
        applied,
        scale,
    })
}
