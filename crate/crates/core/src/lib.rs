//! CPU differentiable Gaussian splatting with instrumented screen-space
//! gradients and two densification criteria: the signed view-space gradient
//! norm and the homodirectional (per-pixel absolute) gradient norm.

pub mod camera;
pub mod cli;
pub mod densify;
pub mod diagnostics;
pub mod error;
pub mod gaussian;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod ply;
pub mod project;
pub mod raster;
pub mod sh;
pub mod synthetic;
pub mod train;

pub use camera::Camera;
pub use error::{Error, Result};
pub use gaussian::{GaussianCloud, GaussianRow, GradientLedger};
pub use image::Image;
pub use project::{ProjectedGaussian, View};
