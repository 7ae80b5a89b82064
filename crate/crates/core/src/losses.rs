//! Pixel-wise losses with analytic gradients with respect to the predicted
//! probabilities.
//!
//! Every loss is a mean over all pixels of the batch. Probabilities (and the
//! probability-weight product of the distance-map loss) are clamped to
//! `[EPS, 1 - EPS]`; the gradient is zero wherever the clamp is active.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{count, lit, ordered_sum, Scalar};

pub const EPS: f64 = 1e-7;

/// Flattened predictions, targets and optional per-pixel weights of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a, T> {
    pub predictions: &'a [T],
    pub targets: &'a [u8],
    pub weights: Option<&'a [T]>,
}

impl<'a, T: Scalar> LossBatch<'a, T> {
    pub fn new(predictions: &'a [T], targets: &'a [u8]) -> Self {
        Self {
            predictions,
            targets,
            weights: None,
        }
    }

    pub fn with_weights(mut self, weights: &'a [T]) -> Self {
        self.weights = Some(weights);
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.predictions.len();
        if n == 0 {
            return Err(Error::Dimensions("empty loss batch".into()));
        }
        if self.targets.len() != n {
            return Err(Error::ShapeMismatch {
                expected: (n, 1),
                got: (self.targets.len(), 1),
            });
        }
        if let Some(w) = self.weights {
            if w.len() != n {
                return Err(Error::ShapeMismatch {
                    expected: (n, 1),
                    got: (w.len(), 1),
                });
            }
        }
        if self.targets.iter().any(|&t| t > 1) {
            return Err(Error::OutOfRange("targets must be 0 or 1".into()));
        }
        if let Some(p) = self.predictions.iter().find(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("prediction {p}")));
        }
        Ok(())
    }

    fn require_weights(&self) -> Result<&'a [T]> {
        self.weights
            .ok_or_else(|| Error::InvalidParameter("this loss needs per-pixel weights".into()))
    }
}

/// Mean loss and its gradient with respect to each prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grad: Vec<T>,
}

/// Per-class multipliers for [`weighted_bce`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub positive: f64,
    pub negative: f64,
}

impl ClassWeights {
    /// Inverse class frequency: `w_c = total / (2 * count_c)`.
    pub fn inverse_frequency(positives: u64, negatives: u64) -> Result<Self> {
        if positives == 0 || negatives == 0 {
            return Err(Error::InvalidParameter(format!(
                "inverse class frequency needs both classes present (pos={positives}, neg={negatives})"
            )));
        }
        let total = (positives + negatives) as f64;
        Ok(Self {
            positive: total / (2.0 * positives as f64),
            negative: total / (2.0 * negatives as f64),
        })
    }
}

#[inline]
fn clamp_unit<T: Scalar>(x: T) -> (T, bool) {
    let eps: T = lit(EPS);
    if x < eps {
        (eps, true)
    } else if x > T::one() - eps {
        (T::one() - eps, true)
    } else {
        (x, false)
    }
}

/// Shared kernel for the BCE family: per-pixel `-(a*log q + b*log(1-q))` on
/// `q = clamp(p * s)` with a pixel multiplier `m`.
fn bce_family<T: Scalar>(
    batch: &LossBatch<'_, T>,
    scale: impl Fn(usize) -> T,
    multiplier: impl Fn(usize) -> T,
) -> LossOutput<T> {
    let n = batch.predictions.len();
    let inv_n = T::one() / count::<T>(n);
    let term = |i: usize| {
        let s = scale(i);
        let (q, _) = clamp_unit(batch.predictions[i] * s);
        let m = multiplier(i);
        if batch.targets[i] == 1 {
            -m * q.ln()
        } else {
            -m * (T::one() - q).ln()
        }
    };
    let loss = ordered_sum(n, term) * inv_n;
    let grad = (0..n)
        .map(|i| {
            let s = scale(i);
            let (q, clamped) = clamp_unit(batch.predictions[i] * s);
            if clamped {
                return T::zero();
            }
            let m = multiplier(i);
            let dq = if batch.targets[i] == 1 {
                -T::one() / q
            } else {
                T::one() / (T::one() - q)
            };
            m * dq * s * inv_n
        })
        .collect();
    LossOutput { loss, grad }
}

/// Binary cross-entropy.
pub fn bce<T: Scalar>(batch: &LossBatch<'_, T>) -> Result<LossOutput<T>> {
    batch.validate()?;
    Ok(bce_family(batch, |_| T::one(), |_| T::one()))
}

/// Binary cross-entropy with one multiplier per class.
pub fn weighted_bce<T: Scalar>(
    batch: &LossBatch<'_, T>,
    weights: ClassWeights,
) -> Result<LossOutput<T>> {
    batch.validate()?;
    if !(weights.positive > 0.0 && weights.negative > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "class weights must be positive, got {weights:?}"
        )));
    }
    let (wp, wn): (T, T) = (lit(weights.positive), lit(weights.negative));
    Ok(bce_family(
        batch,
        |_| T::one(),
        |i| if batch.targets[i] == 1 { wp } else { wn },
    ))
}

/// Distance-map cross-entropy: the prediction is multiplied by the weight
/// inside both log terms, `-(y log(p d) + (1 - y) log(1 - p d))`.
pub fn dmap_bce<T: Scalar>(batch: &LossBatch<'_, T>) -> Result<LossOutput<T>> {
    batch.validate()?;
    let d = batch.require_weights()?;
    if let Some(v) = d.iter().find(|&&v| !(v > T::zero() && v <= T::one())) {
        return Err(Error::OutOfRange(format!(
            "distance-map weight {v} outside (0, 1]"
        )));
    }
    Ok(bce_family(batch, |i| d[i], |_| T::one()))
}

/// Distance-weighted loss `mean((1 - g) d p - g d_max log p)`.
pub fn dw_loss<T: Scalar>(batch: &LossBatch<'_, T>, d_max: T) -> Result<LossOutput<T>> {
    batch.validate()?;
    let d = batch.require_weights()?;
    if !(d_max > T::zero() && d_max.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "d_max must be positive, got {d_max}"
        )));
    }
    let n = batch.predictions.len();
    let inv_n = T::one() / count::<T>(n);
    let term = |i: usize| {
        let (p, _) = clamp_unit(batch.predictions[i]);
        if batch.targets[i] == 1 {
            -d_max * p.ln()
        } else {
            d[i] * p
        }
    };
    let loss = ordered_sum(n, term) * inv_n;
    let grad = (0..n)
        .map(|i| {
            let (p, clamped) = clamp_unit(batch.predictions[i]);
            if clamped {
                T::zero()
            } else if batch.targets[i] == 1 {
                -d_max / p * inv_n
            } else {
                d[i] * inv_n
            }
        })
        .collect();
    Ok(LossOutput { loss, grad })
}

/// Loss selector used by configs and the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    Wbce,
    DmapBce,
    Dw,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Bce => "bce",
            Self::Wbce => "wbce",
            Self::DmapBce => "dmap_bce",
            Self::Dw => "dw",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(Self::Bce),
            "wbce" => Ok(Self::Wbce),
            "dmap_bce" => Ok(Self::DmapBce),
            "dw" => Ok(Self::Dw),
            other => Err(Error::InvalidParameter(format!(
                "unknown loss '{other}' (expected bce, wbce, dmap_bce or dw)"
            ))),
        }
    }
}
