use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Triangular cyclic learning rate.
///
/// Rises linearly from `lr_min` to `lr_max` over `step_size` iterations,
/// falls back over the next `step_size`, and repeats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CyclicLr {
    pub lr_min: f64,
    pub lr_max: f64,
    pub step_size: usize,
}

impl CyclicLr {
    pub fn new(lr_min: f64, lr_max: f64, step_size: usize) -> Result<Self> {
        if !(lr_min > 0.0 && lr_min <= lr_max && lr_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rates must satisfy 0 < lr_min <= lr_max, got {lr_min} and {lr_max}"
            )));
        }
        if step_size == 0 {
            return Err(Error::InvalidParameter(
                "step size must be at least 1".into(),
            ));
        }
        Ok(Self {
            lr_min,
            lr_max,
            step_size,
        })
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        let period = 2 * self.step_size as u64;
        let phase = iteration % period;
        let s = self.step_size as u64;
        let frac = if phase <= s {
            phase as f64 / s as f64
        } else {
            (period - phase) as f64 / s as f64
        };
        self.lr_min + (self.lr_max - self.lr_min) * frac
    }
}
