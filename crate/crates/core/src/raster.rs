//! Grid types, zero padding to patch multiples, patch tiling and stitching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Real-valued `height x width` grid stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
    /// Meters per pixel, when known.
    resolution_m: Option<f64>,
}

impl<T: Scalar> Raster<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        check_dims(height, width, values.len())?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "raster value at row {}, col {}",
                i / width,
                i % width
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            resolution_m: None,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, T::zero())
    }

    pub fn from_fn<F: FnMut(usize, usize) -> T>(
        height: usize,
        width: usize,
        mut f: F,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(height, width, values)
    }

    /// Attaches a spatial resolution in meters per pixel.
    pub fn with_resolution(mut self, resolution_m: f64) -> Result<Self> {
        if !(resolution_m.is_finite() && resolution_m > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "spatial resolution must be positive, got {resolution_m}"
            )));
        }
        self.resolution_m = Some(resolution_m);
        Ok(self)
    }

    pub fn resolution_m(&self) -> Option<f64> {
        self.resolution_m
    }

    pub fn sum(&self) -> T {
        crate::scalar::pairwise_sum(&self.values)
    }

    /// Applies a geometric transform, carrying the resolution along.
    pub fn transformed(&self, t: Transform) -> Self {
        let (height, width, values) = transform_grid(self.height, self.width, &self.values, t);
        Self {
            height,
            width,
            values,
            resolution_m: self.resolution_m,
        }
    }

    pub fn map<F: Fn(T) -> T>(&self, f: F) -> Result<Self> {
        let mut out = Self::new(
            self.height,
            self.width,
            self.values.iter().map(|&v| f(v)).collect(),
        )?;
        out.resolution_m = self.resolution_m;
        Ok(out)
    }
}

impl<T> Raster<T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }
}

impl<T: Copy> Raster<T> {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }
}

/// Grid over `{0, 1}` stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        check_dims(height, width, values.len())?;
        if let Some(i) = values.iter().position(|&v| v > 1) {
            return Err(Error::OutOfRange(format!(
                "mask value {} at index {i} is not 0 or 1",
                values[i]
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![1; height * width])
    }

    pub fn from_fn<F: FnMut(usize, usize) -> bool>(
        height: usize,
        width: usize,
        mut f: F,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c) as u8);
            }
        }
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col] == 1
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.values[row * self.width + col] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    pub fn not(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// `true` when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.values.iter().zip(&other.values).all(|(&a, &b)| a <= b)
    }

    pub fn and(&self, other: &BinaryMask) -> Result<Self> {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<Self> {
        self.zip_with(other, |a, b| a | b)
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(u8, u8) -> u8) -> Result<Self> {
        ensure_same_dims(self.dims(), other.dims())?;
        Ok(Self {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn transformed(&self, t: Transform) -> Self {
        let (height, width, values) = transform_grid(self.height, self.width, &self.values, t);
        Self {
            height,
            width,
            values,
        }
    }

    /// Converts to a `{0, 1}`-valued raster.
    pub fn to_raster<T: Scalar>(&self) -> Raster<T> {
        Raster {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|&v| if v == 1 { T::one() } else { T::zero() })
                .collect(),
            resolution_m: None,
        }
    }
}

/// Geometric transforms used for augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// Mirror left-right.
    Hflip,
    /// Rotate 90 degrees counter-clockwise.
    Rot90,
}

fn transform_grid<V: Copy>(h: usize, w: usize, src: &[V], t: Transform) -> (usize, usize, Vec<V>) {
    match t {
        Transform::Identity => (h, w, src.to_vec()),
        Transform::Hflip => {
            let mut out = Vec::with_capacity(src.len());
            for r in 0..h {
                out.extend(src[r * w..(r + 1) * w].iter().rev());
            }
            (h, w, out)
        }
        Transform::Rot90 => {
            // new[r][c] = old[c][w - 1 - r]
            let mut out = Vec::with_capacity(src.len());
            for r in 0..w {
                for c in 0..h {
                    out.push(src[c * w + (w - 1 - r)]);
                }
            }
            (w, h, out)
        }
    }
}

fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Dimensions(format!(
            "{height}x{width} grid has no pixels"
        )));
    }
    if height * width != len {
        return Err(Error::Dimensions(format!(
            "{height}x{width} grid needs {} values, got {len}",
            height * width
        )));
    }
    Ok(())
}

pub(crate) fn ensure_same_dims(expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch { expected, got });
    }
    Ok(())
}

/// Geometry of a zero-padded image tiled by non-overlapping square patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLayout {
    pub original_height: usize,
    pub original_width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchLayout {
    pub fn for_dims(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::InvalidParameter(
                "patch size must be at least 1".into(),
            ));
        }
        if height == 0 || width == 0 {
            return Err(Error::Dimensions(format!(
                "{height}x{width} grid has no pixels"
            )));
        }
        let rows = height.div_ceil(patch_size);
        let cols = width.div_ceil(patch_size);
        Ok(Self {
            original_height: height,
            original_width: width,
            padded_height: rows * patch_size,
            padded_width: cols * patch_size,
            patch_size,
            rows,
            cols,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }
}

/// Pads `img` with zeros at the bottom and right up to the next multiple of `patch_size`.
pub fn pad_to_multiple<T: Scalar>(
    img: &Raster<T>,
    patch_size: usize,
) -> Result<(Raster<T>, PatchLayout)> {
    let layout = PatchLayout::for_dims(img.height, img.width, patch_size)?;
    let values = pad_values(img.values(), img.width, &layout, T::zero());
    let mut out = Raster::new(layout.padded_height, layout.padded_width, values)?;
    out.resolution_m = img.resolution_m;
    Ok((out, layout))
}

/// Mask counterpart of [`pad_to_multiple`].
pub fn pad_mask_to_multiple(
    mask: &BinaryMask,
    patch_size: usize,
) -> Result<(BinaryMask, PatchLayout)> {
    let layout = PatchLayout::for_dims(mask.height, mask.width, patch_size)?;
    let values = pad_values(mask.values(), mask.width, &layout, 0u8);
    Ok((
        BinaryMask::new(layout.padded_height, layout.padded_width, values)?,
        layout,
    ))
}

fn pad_values<V: Copy>(src: &[V], width: usize, layout: &PatchLayout, fill: V) -> Vec<V> {
    let mut out = vec![fill; layout.padded_height * layout.padded_width];
    for r in 0..layout.original_height {
        out[r * layout.padded_width..r * layout.padded_width + width]
            .copy_from_slice(&src[r * width..(r + 1) * width]);
    }
    out
}

/// Cuts a padded raster into `rows * cols` patches in row-major patch order.
pub fn extract_patches<T: Scalar>(img: &Raster<T>, layout: &PatchLayout) -> Result<Vec<Raster<T>>> {
    ensure_same_dims((layout.padded_height, layout.padded_width), img.dims())?;
    extract_values(img.values(), layout)
        .into_iter()
        .map(|v| Raster::new(layout.patch_size, layout.patch_size, v))
        .collect()
}

/// Mask counterpart of [`extract_patches`].
pub fn extract_mask_patches(mask: &BinaryMask, layout: &PatchLayout) -> Result<Vec<BinaryMask>> {
    ensure_same_dims((layout.padded_height, layout.padded_width), mask.dims())?;
    extract_values(mask.values(), layout)
        .into_iter()
        .map(|v| BinaryMask::new(layout.patch_size, layout.patch_size, v))
        .collect()
}

fn extract_values<V: Copy>(src: &[V], layout: &PatchLayout) -> Vec<Vec<V>> {
    let p = layout.patch_size;
    let mut patches = Vec::with_capacity(layout.patch_count());
    for pr in 0..layout.rows {
        for pc in 0..layout.cols {
            let mut v = Vec::with_capacity(p * p);
            for r in 0..p {
                let start = (pr * p + r) * layout.padded_width + pc * p;
                v.extend_from_slice(&src[start..start + p]);
            }
            patches.push(v);
        }
    }
    patches
}

/// Reassembles patches and crops the padding away, returning the original dimensions.
pub fn stitch_predictions<T: Scalar>(
    patches: &[Raster<T>],
    layout: &PatchLayout,
) -> Result<Raster<T>> {
    if patches.len() != layout.patch_count() {
        return Err(Error::Dimensions(format!(
            "layout needs {} patches, got {}",
            layout.patch_count(),
            patches.len()
        )));
    }
    let p = layout.patch_size;
    for patch in patches {
        ensure_same_dims((p, p), patch.dims())?;
    }
    let (h, w) = (layout.original_height, layout.original_width);
    let mut values = Vec::with_capacity(h * w);
    for r in 0..h {
        let pr = r / p;
        for pc in 0..layout.cols {
            let c0 = pc * p;
            if c0 >= w {
                break;
            }
            let take = p.min(w - c0);
            let row = &patches[pr * layout.cols + pc].values()[(r % p) * p..(r % p) * p + take];
            values.extend_from_slice(row);
        }
    }
    Raster::new(h, w, values)
}

/// Binarizes probabilities: 1 where `pred >= tau`.
pub fn threshold<T: Scalar>(pred: &Raster<T>, tau: T) -> Result<BinaryMask> {
    if let Some(v) = pred
        .values()
        .iter()
        .find(|&&v| v < T::zero() || v > T::one())
    {
        return Err(Error::OutOfRange(format!("probability {v} outside [0, 1]")));
    }
    BinaryMask::new(
        pred.height(),
        pred.width(),
        pred.values().iter().map(|&v| (v >= tau) as u8).collect(),
    )
}
