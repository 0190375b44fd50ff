//! Screen-space footprints of 3D Gaussians.
//!
//! Pixel `(x, y)` is sampled at its center `(x + 0.5, y + 0.5)`. The 2D
//! covariance uses the local affine (EWA) approximation of the perspective
//! map and is dilated by [`LOW_PASS`] on the diagonal.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use crate::camera::Camera;
use crate::raster::ALPHA_MAX;
use crate::gaussian::GaussianCloud;
use crate::sh;

/// Isotropic dilation added to every screen-space covariance, px^2.
pub const LOW_PASS: f64 = 0.3;

/// Contributions with alpha below this are skipped by the rasterizer.
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;

/// How a cloud is mapped to the image plane.
#[derive(Clone, Debug, PartialEq)]
pub enum View {
    Camera(Camera),
    /// Positions are already pixel coordinates; z only orders the blend.
    Identity { width: usize, height: usize },
}

impl View {
    pub fn width(&self) -> usize {
        match self {
            View::Camera(c) => c.width,
            View::Identity { width, .. } => *width,
        }
    }

    pub fn height(&self) -> usize {
        match self {
            View::Camera(c) => c.height,
            View::Identity { height, .. } => *height,
        }
    }

    pub fn project(&self, cloud: &GaussianCloud) -> Vec<ProjectedGaussian> {
        match self {
            View::Camera(c) => project(cloud, c),
            View::Identity { width, height } => project_identity(cloud, *width, *height),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: [f64; 2],
    /// Inverse screen covariance `[[a, b], [b, c]]` stored as `(a, b, c)`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub rgb: [f64; 3],
    pub opacity: f64,
    /// Three standard deviations along the major axis, px.
    pub radius: f64,
    /// Half-widths of the box outside which alpha is below [`ALPHA_SKIP`].
    pub extent: [f64; 2],
    /// Squared Mahalanobis distance at which alpha reaches [`ALPHA_SKIP`].
    pub level: f64,
    pub source: usize,
}

impl ProjectedGaussian {
    /// Alpha before the 0.99 clamp at pixel center `p`.
    #[inline]
    pub fn raw_alpha_at(&self, p: [f64; 2]) -> (f64, f64, [f64; 2]) {
        let d = [p[0] - self.mean2d[0], p[1] - self.mean2d[1]];
        let q = self.conic[0] * d[0] * d[0]
            + 2.0 * self.conic[1] * d[0] * d[1]
            + self.conic[2] * d[1] * d[1];
        let g = (-0.5 * q).exp();
        (self.opacity * g, g, d)
    }

    /// [`raw_alpha_at`](Self::raw_alpha_at) for pixels that pass the
    /// blending threshold, `None` for the rest. Points clearly outside the
    /// cutoff ellipse are rejected before the exponential; the decision is
    /// the same as comparing the clamped alpha against [`ALPHA_SKIP`].
    #[inline]
    pub fn visible_alpha_at(&self, p: [f64; 2]) -> Option<(f64, f64, [f64; 2])> {
        let d = [p[0] - self.mean2d[0], p[1] - self.mean2d[1]];
        let q = self.conic[0] * d[0] * d[0]
            + 2.0 * self.conic[1] * d[0] * d[1]
            + self.conic[2] * d[1] * d[1];
        if q > self.level * (1.0 + 1e-9) + 1e-9 {
            return None;
        }
        let g = (-0.5 * q).exp();
        let raw = self.opacity * g;
        if raw.min(ALPHA_MAX) < ALPHA_SKIP {
            return None;
        }
        Some((raw, g, d))
    }

    /// Inclusive pixel range `(x0, x1, y0, y1)` whose centers fall inside the
    /// alpha box, clipped to the image; `None` when empty.
    pub fn pixel_rect(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let lo = |m: f64, e: f64| (m - e - 0.5).ceil();
        let hi = |m: f64, e: f64| (m + e - 0.5).floor();
        let x0 = lo(self.mean2d[0], self.extent[0]).max(0.0);
        let x1 = hi(self.mean2d[0], self.extent[0]).min(width as f64 - 1.0);
        let y0 = lo(self.mean2d[1], self.extent[1]).max(0.0);
        let y1 = hi(self.mean2d[1], self.extent[1]).min(height as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            return None;
        }
        Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
    }
}

/// Builds the footprint from a screen covariance; `None` if it can never
/// reach the alpha threshold inside the image.
fn footprint(
    mean2d: [f64; 2],
    cov2d: Matrix2<f64>,
    depth: f64,
    rgb: [f64; 3],
    opacity: f64,
    source: usize,
    width: usize,
    height: usize,
) -> Option<ProjectedGaussian> {
    let cov = cov2d + Matrix2::identity() * LOW_PASS;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det];
    // alpha >= 1/255  <=>  mahalanobis^2 <= 2 ln(255 * opacity)
    let level = 2.0 * (opacity / ALPHA_SKIP).ln();
    if !(level > 0.0) {
        return None;
    }
    let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let pad = |v: f64| v * (1.0 + 1e-9) + 1e-9;
    let p = ProjectedGaussian {
        mean2d,
        conic,
        depth,
        rgb,
        opacity,
        radius: 3.0 * lambda_max.sqrt(),
        extent: [pad((level * cov[(0, 0)]).sqrt()), pad((level * cov[(1, 1)]).sqrt())],
        level,
        source,
    };
    p.pixel_rect(width, height)?;
    Some(p)
}

/// Perspective projection with near-plane and footprint culling. Output order
/// follows Gaussian index.
pub fn project(cloud: &GaussianCloud, camera: &Camera) -> Vec<ProjectedGaussian> {
    let w = camera.rotation();
    let center = camera.center();
    (0..cloud.len())
        .filter_map(|i| {
            let pc = camera.to_camera(&cloud.positions[i]);
            if pc.z <= camera.near {
                return None;
            }
            let j = projection_jacobian(camera, &pc);
            let t = j * w;
            let cov2d = t * cloud.covariance3d(i) * t.transpose();
            let mean2d = [
                camera.fx * pc.x / pc.z + camera.cx,
                camera.fy * pc.y / pc.z + camera.cy,
            ];
            let dir = (cloud.positions[i] - center).normalize();
            let rgb = sh::eval_color(cloud.coeffs(i), &dir, cloud.sh_degree);
            footprint(
                mean2d,
                cov2d,
                pc.z,
                rgb,
                cloud.opacity(i),
                i,
                camera.width,
                camera.height,
            )
        })
        .collect()
}

/// Pure 2D regime: `(x, y)` are pixel coordinates, the screen covariance is
/// the upper-left block of the 3D covariance.
pub fn project_identity(cloud: &GaussianCloud, width: usize, height: usize) -> Vec<ProjectedGaussian> {
    let dir = canonical_dir();
    (0..cloud.len())
        .filter_map(|i| {
            let p = cloud.positions[i];
            let cov = cloud.covariance3d(i);
            let cov2d = cov.fixed_view::<2, 2>(0, 0).into_owned();
            let rgb = sh::eval_color(cloud.coeffs(i), &dir, cloud.sh_degree);
            footprint([p.x, p.y], cov2d, p.z, rgb, cloud.opacity(i), i, width, height)
        })
        .collect()
}

/// Direction used to decode colors in the 2D regime.
pub fn canonical_dir() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, 1.0)
}

pub(crate) fn projection_jacobian(camera: &Camera, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * pc.x * iz2,
        0.0,
        camera.fy * iz,
        -camera.fy * pc.y * iz2,
    )
}

/// Inverse of a symmetric 2x2 given as `(a, b, c)`.
pub fn conic_to_cov(conic: [f64; 3]) -> Matrix2<f64> {
    let det = conic[0] * conic[2] - conic[1] * conic[1];
    Matrix2::new(conic[2] / det, -conic[1] / det, -conic[1] / det, conic[0] / det)
}

pub(crate) fn embed2(m: &Matrix2<f64>) -> Matrix3<f64> {
    let mut out = Matrix3::zeros();
    out.fixed_view_mut::<2, 2>(0, 0).copy_from(m);
    out
}
