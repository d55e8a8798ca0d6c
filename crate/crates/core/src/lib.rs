//! Plenoptic voxel grids: radiance fields without neural networks.
//!
//! A scene is a sparse lattice of opacities and degree-2 spherical-harmonic
//! colors, rendered with differentiable volume rendering and fitted to
//! calibrated photographs by RMSProp on the rendering loss.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below fix the precision used for training and serialization.

pub mod camera;
pub mod dataset;
pub mod error;
pub mod grad;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod msi;
pub mod optim;
pub mod raster;
pub mod render;
pub mod scalar;
pub mod sh;
pub mod toy;
pub mod trainer;
pub mod vec3;

pub use error::{Error, FormatError, Result};
pub use scalar::Scalar;
pub use vec3::Vec3;

/// Single-precision grid, the training and on-disk precision.
pub type Grid = grid::SparseGrid<f32>;
/// Double-precision grid for reference computations.
pub type Grid64 = grid::SparseGrid<f64>;
pub type Gradients = grad::GradientBuffer<f32>;
pub type RgbImage = raster::Image<f32>;
