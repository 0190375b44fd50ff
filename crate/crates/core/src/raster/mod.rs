//! Tile-based rasterizer and its analytic adjoint.

pub mod backward;
pub mod forward;

pub use backward::{
    accumulate_ledger, backward, backward_with, capture_pixel_gradients, AbsMode,
    BackwardOptions, PixelGradientMap, ViewGradients,
};
pub use forward::{
    depth_order, pixel_contributions, render, render_naive, Contribution, RenderArtifacts,
    ALPHA_MAX, MIN_TRANSMITTANCE, TILE_SIZE,
};

use crate::error::Result;
use crate::gaussian::GaussianCloud;
use crate::image::Image;
use crate::project::{ProjectedGaussian, View};

/// Projects and renders `cloud` in one call.
pub fn render_view(
    cloud: &GaussianCloud,
    view: &View,
    background: [f64; 3],
) -> Result<(Vec<ProjectedGaussian>, Image, RenderArtifacts)> {
    let projected = view.project(cloud);
    let (image, artifacts) = render(&projected, view.width(), view.height(), background)?;
    Ok((projected, image, artifacts))
}
