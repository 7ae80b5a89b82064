//! Per-pixel loss weights derived from a line mask.
//!
//! The lines are thickened by a `w x w` dilation, the Euclidean distance
//! transform of the thickened band is divided by `R` and squashed through the
//! logistic function, and everything outside the band receives the constant
//! background weight `k`. Inside the band the weight falls from close to 1 on
//! the original line towards 0.5 at the band edge.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{dilate, edt, StructuringElement};
use crate::raster::{BinaryMask, Raster};
use crate::scalar::{lit, sigmoid, Scalar};

/// How the logistic term is combined with the background weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// `band * sigmoid(edt / R) + k * (1 - band)`: background weight is exactly `k`.
    #[default]
    Masked,
    /// `sigmoid(edt / R) + k * (1 - band)`: the unmasked form, whose background
    /// weight is `0.5 + k`. Kept for comparison only.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceMapParams {
    /// Side of the square dilation element (odd).
    pub w: usize,
    /// Relaxation divisor applied to the distance transform.
    pub r: f64,
    /// Background weight in `(0, 1]`.
    pub k: f64,
    #[serde(default)]
    pub mode: CombineMode,
}

impl Default for DistanceMapParams {
    fn default() -> Self {
        Self::new(3, 1.0, 0.1)
    }
}

impl DistanceMapParams {
    pub const fn new(w: usize, r: f64, k: f64) -> Self {
        Self {
            w,
            r,
            k,
            mode: CombineMode::Masked,
        }
    }

    /// Background weight tuned for a heavier imbalance (`k = 0.25`).
    pub const fn alternative() -> Self {
        Self::new(3, 1.0, 0.25)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w == 0 || self.w.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "w must be odd and >= 1, got {}",
                self.w
            )));
        }
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "R must be positive, got {}",
                self.r
            )));
        }
        if !(self.k > 0.0 && self.k <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "k must lie in (0, 1], got {}",
                self.k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap<T> {
    weights: Raster<T>,
    /// Dilated line band the logistic term was evaluated on.
    band: BinaryMask,
}

impl<T: Scalar> DistanceMap<T> {
    pub fn weights(&self) -> &Raster<T> {
        &self.weights
    }

    pub fn band(&self) -> &BinaryMask {
        &self.band
    }

    pub fn dims(&self) -> (usize, usize) {
        self.weights.dims()
    }

    pub fn into_weights(self) -> Raster<T> {
        self.weights
    }
}

pub fn build_distance_map<T: Scalar>(
    lines: &BinaryMask,
    params: &DistanceMapParams,
) -> Result<DistanceMap<T>> {
    params.validate()?;
    let band = dilate(lines, StructuringElement::square(params.w)?);
    let dist = edt::<T>(&band);
    let r: T = lit(params.r);
    let k: T = lit(params.k);
    let weights = band
        .values()
        .iter()
        .zip(dist.values())
        .map(|(&inside, &e)| {
            let s = sigmoid(e / r);
            match (params.mode, inside) {
                (CombineMode::Masked, 1) => s,
                (CombineMode::Masked, _) => k,
                (CombineMode::Literal, 1) => s,
                (CombineMode::Literal, _) => s + k,
            }
        })
        .collect();
    Ok(DistanceMap {
        weights: Raster::new(lines.height(), lines.width(), weights)?,
        band,
    })
}
