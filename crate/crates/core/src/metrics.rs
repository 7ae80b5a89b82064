//! Confusion counts, overlap scores and the Matthews correlation coefficient,
//! plus dilation-based tolerance evaluation for thin line masks.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{dilate, StructuringElement};
use crate::raster::{ensure_same_dims, BinaryMask};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub const fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts with the roles of the two classes exchanged.
    pub fn swap_classes(&self) -> Self {
        Self::new(self.tn, self.fn_, self.fp, self.tp)
    }

    /// Counts with prediction and ground truth exchanged.
    pub fn transpose(&self) -> Self {
        Self::new(self.tp, self.fn_, self.fp, self.tn)
    }

    /// Matthews correlation coefficient in `[-1, 1]`; 0 when any marginal is empty.
    pub fn mcc<T: Scalar>(&self) -> T {
        let f = |v: u64| T::from_u64(v).expect("count fits scalar");
        let (tp, fp, fn_, tn) = (f(self.tp), f(self.fp), f(self.fn_), f(self.tn));
        let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        if denom == T::zero() {
            return T::zero();
        }
        let v = (tp * tn - fp * fn_) / denom;
        v.max(-T::one()).min(T::one())
    }

    /// `tp / (tp + fp + fn)`, 1 when both masks are empty.
    pub fn iou<T: Scalar>(&self) -> T {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            return T::one();
        }
        T::from_u64(self.tp).unwrap() / T::from_u64(union).unwrap()
    }

    /// `2 tp / (2 tp + fp + fn)`, 1 when both masks are empty.
    pub fn dice<T: Scalar>(&self) -> T {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            return T::one();
        }
        T::from_u64(2 * self.tp).unwrap() / T::from_u64(denom).unwrap()
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(
            self.tp + o.tp,
            self.fp + o.fp,
            self.fn_ + o.fn_,
            self.tn + o.tn,
        )
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Pixel-wise tallies with class 1 as positive.
pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    ensure_same_dims(gt.dims(), pred.dims())?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// A tolerance in meters resolved to a dilation radius in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceSpec {
    pub tolerance_m: f64,
    pub resolution_m: f64,
}

impl ToleranceSpec {
    pub fn new(tolerance_m: f64, resolution_m: f64) -> Result<Self> {
        if !(tolerance_m.is_finite() && tolerance_m >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tolerance must be >= 0 m, got {tolerance_m}"
            )));
        }
        if !(resolution_m.is_finite() && resolution_m > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "resolution must be > 0 m/px, got {resolution_m}"
            )));
        }
        Ok(Self {
            tolerance_m,
            resolution_m,
        })
    }

    /// `round(tolerance / resolution)`.
    pub fn radius_px(&self) -> usize {
        (self.tolerance_m / self.resolution_m).round() as usize
    }

    /// Side of the square dilation element, `2r + 1`.
    pub fn se_size(&self) -> usize {
        2 * self.radius_px() + 1
    }

    /// Tolerance actually applied after rounding to whole pixels.
    pub fn effective_tolerance_m(&self) -> f64 {
        self.radius_px() as f64 * self.resolution_m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub iou: f64,
    pub dice: f64,
    pub mcc: f64,
}

impl Scores {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        Self {
            iou: c.iou(),
            dice: c.dice(),
            mcc: c.mcc(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceEval {
    pub counts: ConfusionCounts,
    pub scores: Scores,
    pub radius_px: usize,
    pub effective_tolerance_m: f64,
}

/// Dilates both masks by a square of radius `r` pixels and scores the dilated pair.
pub fn evaluate_with_radius(
    pred_lines: &BinaryMask,
    gt_lines: &BinaryMask,
    radius_px: usize,
) -> Result<ConfusionCounts> {
    ensure_same_dims(gt_lines.dims(), pred_lines.dims())?;
    let se = StructuringElement::square(2 * radius_px + 1)?;
    confusion(&dilate(pred_lines, se), &dilate(gt_lines, se))
}

pub fn evaluate_with_tolerance(
    pred_lines: &BinaryMask,
    gt_lines: &BinaryMask,
    spec: &ToleranceSpec,
) -> Result<ToleranceEval> {
    let counts = evaluate_with_radius(pred_lines, gt_lines, spec.radius_px())?;
    Ok(ToleranceEval {
        counts,
        scores: Scores::from_counts(&counts),
        radius_px: spec.radius_px(),
        effective_tolerance_m: spec.effective_tolerance_m(),
    })
}
