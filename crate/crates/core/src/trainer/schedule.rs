use super::{Scheduler, TrainConfig};

/// Learning rate used throughout `epoch` (0-based).
///
/// Step decay multiplies `lr0` by `gamma` once per completed band instead of
/// calling `powi`, so `0.001 * 0.1 * 0.1` lands on `1e-5` exactly.
pub fn scheduler_lr(config: &TrainConfig, epoch: usize) -> f64 {
    match config.scheduler {
        Scheduler::None => config.lr0,
        Scheduler::Step { step_size, gamma } => {
            let bands = epoch / step_size.max(1);
            (0..bands).fold(config.lr0, |lr, _| lr * gamma)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_bands() {
        let c = TrainConfig {
            scheduler: Scheduler::default_step(),
            ..TrainConfig::default()
        };
        for e in 0..10 {
            assert_eq!(scheduler_lr(&c, e), 0.001);
        }
        for e in 10..20 {
            assert_eq!(scheduler_lr(&c, e), 0.0001);
        }
        for e in 20..25 {
            assert_eq!(scheduler_lr(&c, e), 1e-5);
        }
    }

    #[test]
    fn constant_without_scheduler() {
        let c = TrainConfig::default();
        assert!((0..100).all(|e| scheduler_lr(&c, e) == 0.001));
    }
}
