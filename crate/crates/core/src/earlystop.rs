//! Patience-based early stopping.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopperConfig {
    pub direction: Direction,
    pub patience: usize,
    #[serde(default)]
    pub min_delta: f64,
}

impl StopperConfig {
    pub fn new(direction: Direction, patience: usize) -> Result<Self> {
        let cfg = Self {
            direction,
            patience,
            min_delta: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::InvalidParameter(
                "patience must be at least 1".into(),
            ));
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "min_delta must be >= 0, got {}",
                self.min_delta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopperState<T> {
    pub best_value: T,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub stopped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Improved,
    /// Epochs without improvement so far, still below patience.
    Waiting(usize),
    Stop,
}

#[derive(Debug, Clone)]
pub struct EarlyStopper<T> {
    config: StopperConfig,
    state: Option<StopperState<T>>,
    last_epoch: Option<usize>,
}

impl<T: Scalar> EarlyStopper<T> {
    pub fn new(config: StopperConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: None,
            last_epoch: None,
        })
    }

    pub fn config(&self) -> &StopperConfig {
        &self.config
    }

    pub fn state(&self) -> Option<&StopperState<T>> {
        self.state.as_ref()
    }

    pub fn is_stopped(&self) -> bool {
        self.state.is_some_and(|s| s.stopped)
    }

    fn improves(&self, value: T, best: T) -> bool {
        let delta = T::from_f64(self.config.min_delta).unwrap();
        match self.config.direction {
            Direction::Maximize => value > best + delta,
            Direction::Minimize => value < best - delta,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: T) -> Result<Decision> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "monitored value {value} at epoch {epoch}"
            )));
        }
        if self.last_epoch.is_some_and(|last| epoch <= last) {
            return Err(Error::State(format!(
                "epoch {epoch} observed after epoch {}",
                self.last_epoch.unwrap()
            )));
        }
        if self.is_stopped() {
            return Err(Error::State("stopper already triggered".into()));
        }
        self.last_epoch = Some(epoch);
        let state = match self.state.as_mut() {
            None => {
                self.state = Some(StopperState {
                    best_value: value,
                    best_epoch: epoch,
                    epochs_since_improvement: 0,
                    stopped: false,
                });
                return Ok(Decision::Improved);
            }
            Some(s) => *s,
        };
        let next = if self.improves(value, state.best_value) {
            StopperState {
                best_value: value,
                best_epoch: epoch,
                epochs_since_improvement: 0,
                stopped: false,
            }
        } else {
            let waited = state.epochs_since_improvement + 1;
            StopperState {
                epochs_since_improvement: waited,
                stopped: waited >= self.config.patience,
                ..state
            }
        };
        self.state = Some(next);
        Ok(if next.epochs_since_improvement == 0 {
            Decision::Improved
        } else if next.stopped {
            Decision::Stop
        } else {
            Decision::Waiting(next.epochs_since_improvement)
        })
    }

    /// Epoch whose snapshot should be restored.
    pub fn best_checkpoint(&self) -> Result<usize> {
        self.state
            .map(|s| s.best_epoch)
            .ok_or_else(|| Error::State("no observations yet".into()))
    }
}

/// Validation quantity that drives early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    Mcc,
    Bce,
}

impl Monitor {
    pub fn direction(self) -> Direction {
        match self {
            Self::Mcc => Direction::Maximize,
            Self::Bce => Direction::Minimize,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mcc => "mcc",
            Self::Bce => "bce",
        }
    }
}

impl fmt::Display for Monitor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Monitor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcc" => Ok(Self::Mcc),
            "bce" => Ok(Self::Bce),
            other => Err(Error::InvalidParameter(format!(
                "unknown monitor '{other}' (expected mcc or bce)"
            ))),
        }
    }
}
