use crate::tensor::{BatchStats, NodeId, Normalization, Tape};

use super::{Mode, NnError};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Running statistics of one batch-norm layer. The affine `gamma`/`beta`
/// live in the [`ParamSet`](super::ParamSet) next to the other weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential moving average update; the variance is folded in with
    /// the unbiased (`n - 1`) estimator.
    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let correction = stats.count as f64 / (stats.count as f64 - 1.0);
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c] * correction;
        }
    }

    /// Record the normalization without touching running statistics.
    pub(crate) fn record(
        &self,
        tape: &mut Tape,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: Mode,
    ) -> Result<(NodeId, Option<BatchStats>), NnError> {
        let norm = match mode {
            Mode::Train => {
                let batch = tape.value(x).shape()[0];
                if batch < 2 {
                    return Err(NnError::Contract(format!(
                        "train-mode batch norm needs at least 2 samples, got {batch}"
                    )));
                }
                Normalization::Batch { eps: self.eps }
            }
            Mode::Eval => Normalization::Fixed {
                mean: &self.running_mean,
                var: &self.running_var,
                eps: self.eps,
            },
        };
        Ok(tape.batch_norm(x, gamma, beta, norm)?)
    }
}

/// Batch normalization that also advances the running statistics in train mode.
pub fn batchnorm_forward(
    tape: &mut Tape,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    state: &mut BatchNormState,
    mode: Mode,
) -> Result<NodeId, NnError> {
    let (out, stats) = state.record(tape, x, gamma, beta, mode)?;
    if let Some(stats) = stats {
        state.update(&stats);
    }
    Ok(out)
}
