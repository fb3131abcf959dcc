use std::collections::BTreeMap;

use crate::nn::ParamSet;
use crate::tensor::Tensor;

use super::TrainError;

/// Per-parameter first and second moments plus the shared step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
///
/// Gradients are validated before anything is touched: a non-finite entry
/// or a shape mismatch leaves both `params` and `state` unchanged.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| TrainError::Mismatch(format!("{name}: no such parameter")))?;
        if p.shape() != g.shape() {
            return Err(TrainError::Mismatch(format!(
                "{name}: gradient {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient { param: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("validated above");
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let ratio = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            *w -= lr * ratio;
        }
    }
    Ok(())
}
