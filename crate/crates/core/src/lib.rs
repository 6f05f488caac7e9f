//! Counting sub-pixel objects in low-resolution multispectral rasters by
//! joint semantic segmentation and density estimation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`ops`]: a small dense tensor engine with hand-written
//!   reverse-mode gradients.
//! - [`nn`] and [`model`]: layers with cached activations and the three
//!   network architectures, plus the joint cross-entropy + squared-error loss.
//! - [`gt`]: point annotations to density maps and semantic masks.
//! - [`sensor`]: reproducible synthetic multispectral scenes.
//! - [`metrics`]: segmentation, density and counting metrics.
//! - [`train`]: optimizer, patch sampling, checkpoints, prediction,
//!   evaluation and the band ablation.
//! - [`raster`]: multi-band rasters and their on-disk format.

pub mod error;
pub mod gt;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod parallel;
pub mod raster;
pub mod sensor;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Shape4, Tensor4};
