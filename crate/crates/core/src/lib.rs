//! Binary segmentation of thin structures under extreme class imbalance.
//!
//! The crate covers the whole pipeline: raster tiling, binary morphology and
//! exact distance transforms, distance-map loss weights, class-imbalance-aware
//! losses with analytic gradients, confusion-based metrics with tolerance
//! evaluation, patience-based early stopping, a small encoder-decoder network
//! trained from scratch, synthetic scene generation and simple file formats.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar type for common use.

pub mod data;
pub mod distmap;
pub mod earlystop;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod morphology;
pub mod raster;
pub mod scalar;

pub use error::{Error, Result};
pub use raster::{BinaryMask, PatchLayout, Raster, Transform};
pub use scalar::Scalar;

pub type Raster32 = raster::Raster<f32>;
pub type Raster64 = raster::Raster<f64>;
pub type DistanceMap32 = distmap::DistanceMap<f32>;
pub type DistanceMap64 = distmap::DistanceMap<f64>;
pub type Network32 = model::Network<f32>;
pub type Network64 = model::Network<f64>;
pub type Checkpoint32 = model::Checkpoint<f32>;
pub type Checkpoint64 = model::Checkpoint<f64>;
pub type Sample32 = model::Sample<f32>;
pub type Sample64 = model::Sample<f64>;
