use thiserror::Error;

use crate::dataset::{batch_indices, LabeledSet};
use crate::nn::{MicroResNet, Mode};

use super::{
    full_precision_step, mixed_precision_step, scheduler_lr, AdamState, LossScaler, Mark, Precision,
    TrainConfig, TrainError,
};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of the (unscaled) batch losses.
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
    /// Mixed precision steps skipped because of overflow.
    pub skipped_steps: usize,
}

/// Training stopped early; `completed` holds the epochs that finished.
#[derive(Debug, Error)]
#[error("training aborted after {} epoch(s): {error}", completed.len())]
pub struct TrainAborted {
    pub completed: Vec<EpochStats>,
    #[source]
    pub error: TrainError,
}

impl TrainAborted {
    pub fn new(completed: Vec<EpochStats>, error: impl Into<TrainError>) -> Self {
        TrainAborted {
            completed,
            error: error.into(),
        }
    }
}

/// Checks shared by the single and multi worker loops.
pub(crate) fn check_run(config: &TrainConfig, model: &MicroResNet, data: &LabeledSet) -> Result<(), TrainError> {
    config.validate()?;
    if config.epochs == 0 {
        return Ok(());
    }
    if data.side() != model.config().input_side {
        return Err(TrainError::Config(format!(
            "data side {} does not match network input side {}",
            data.side(),
            model.config().input_side
        )));
    }
    if model.mode() == Mode::Train && (data.len() < 2 || config.batch_size < 2) {
        return Err(TrainError::Config(
            "batch normalization in train mode needs at least two samples per batch".into(),
        ));
    }
    if data.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    Ok(())
}

/// Train `model` in place for `config.epochs` epochs.
///
/// The model's current [`Mode`] decides how normalization behaves. In train
/// mode a trailing batch of one sample is skipped. With more than one worker
/// the run is delegated to the data parallel group.
pub fn train_run(
    config: &TrainConfig,
    model: &mut MicroResNet,
    data: &LabeledSet,
) -> Result<Vec<EpochStats>, TrainAborted> {
    check_run(config, model, data).map_err(|e| TrainAborted::new(Vec::new(), e))?;
    if config.workers > 1 {
        return crate::parallel::train_data_parallel(config, model, data);
    }
    let mut adam = AdamState::new();
    let mut scaler = LossScaler::new(config.loss_scale, config.growth_interval);
    let mut stats = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Mark::now();
        let lr = scheduler_lr(config, epoch);
        let mut losses = Vec::new();
        let mut skipped = 0;
        let batches = match batch_indices(data.len(), config.batch_size, config.seed, epoch as u64) {
            Ok(b) => b,
            Err(e) => return Err(TrainAborted::new(stats, e)),
        };
        for idx in batches {
            if model.mode() == Mode::Train && idx.len() < 2 {
                continue;
            }
            let result = data.batch(&idx).map_err(TrainError::from).and_then(|batch| match config.precision {
                Precision::Full => full_precision_step(model, &batch, &mut adam, lr),
                Precision::Mixed => {
                    let s = mixed_precision_step(model, &batch, &mut adam, &mut scaler, lr)?;
                    if !s.applied {
                        skipped += 1;
                    }
                    Ok(s.loss)
                }
            });
            match result {
                Ok(loss) => losses.push(loss),
                Err(e) => return Err(TrainAborted::new(stats, e)),
            }
        }
        stats.push(EpochStats {
            epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            lr,
            wall_seconds: start.elapsed_seconds(),
            skipped_steps: skipped,
        });
    }
    Ok(stats)
}

/// `epoch,mean_loss,lr,wall_seconds` CSV.
pub fn render_training_log(stats: &[EpochStats]) -> String {
    let mut out = String::from("epoch,mean_loss,lr,wall_seconds\n");
    for s in stats {
        out.push_str(&format!("{},{},{},{}\n", s.epoch, s.mean_loss, s.lr, s.wall_seconds));
    }
    out
}
