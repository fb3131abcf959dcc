use super::TrainError;

/// Below this the scaler gives up.
pub const MIN_LOSS_SCALE: f64 = 1.0 / 1048576.0;

/// Round to the nearest IEEE binary16 value (ties to even) and widen back.
pub fn quantize_binary16(x: f64) -> f64 {
    crate::tensor::round_binary16(x)
}

/// Dynamic loss scale: halve on overflow, double after `growth_interval`
/// consecutive clean steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LossScaler {
    scale: f64,
    growth_interval: usize,
    clean_steps: usize,
}

impl LossScaler {
    pub fn new(initial: f64, growth_interval: usize) -> Self {
        LossScaler {
            scale: initial,
            growth_interval: growth_interval.max(1),
            clean_steps: 0,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Record one step. Overflow halves the scale and errors once it drops
    /// below [`MIN_LOSS_SCALE`].
    pub fn update(&mut self, overflowed: bool) -> Result<(), TrainError> {
        if overflowed {
            self.clean_steps = 0;
            self.scale *= 0.5;
            if self.scale < MIN_LOSS_SCALE {
                return Err(TrainError::PersistentOverflow { scale: self.scale });
            }
        } else {
            self.clean_steps += 1;
            if self.clean_steps == self.growth_interval {
                self.clean_steps = 0;
                self.scale *= 2.0;
            }
        }
        Ok(())
    }
}
