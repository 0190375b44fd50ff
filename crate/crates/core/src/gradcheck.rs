//! Central finite-difference checks of the analytic backward pass, plus the
//! random scenes they run on.
//!
//! The loss is L1 against a fixed target. Steps that cross a non-smooth
//! point (alpha skip threshold, 0.99 clamp, early termination, an L1
//! residual changing sign, a color clamp) are detected by comparing the set
//! of blended terms on both sides and retried with a smaller step.

use nalgebra::{Vector3, Vector4};
use rand::Rng;

use crate::camera::Camera;
use crate::error::Result;
use crate::gaussian::{logit, GaussianCloud, GaussianRow};
use crate::image::Image;
use crate::loss;
use crate::project::{ProjectedGaussian, View};
use crate::raster::{backward, pixel_contributions, render, ALPHA_MAX};
use crate::sh;

#[derive(Clone, Debug)]
pub struct Scene {
    pub cloud: GaussianCloud,
    pub view: View,
    pub target: Image,
    pub background: [f64; 3],
}

fn random_row(rng: &mut impl Rng, position: Vector3<f64>, log_scale: Vector3<f64>, degree: usize) -> GaussianRow {
    let q = Vector4::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    let q = if q.norm() < 0.1 { Vector4::new(1.0, 0.0, 0.0, 0.0) } else { q };
    let mut coeffs = vec![[0.0; 3]; sh::coeff_count(degree)];
    coeffs[0] = [0, 1, 2].map(|_| sh::dc_from_color(rng.gen_range(0.05..0.95)));
    for c in coeffs.iter_mut().skip(1) {
        *c = [0, 1, 2].map(|_| rng.gen_range(-0.15..0.15));
    }
    GaussianRow {
        position,
        log_scale,
        rotation: q,
        opacity_logit: logit(rng.gen_range(0.15..0.85)),
        coeffs,
    }
}

fn random_target(rng: &mut impl Rng, width: usize, height: usize) -> Image {
    Image::from_fn(width, height, |_, _| [rng.gen(), rng.gen(), rng.gen()])
}

/// Gaussians placed directly in pixel coordinates.
pub fn random_identity_scene(rng: &mut impl Rng, n: usize, width: usize, height: usize) -> Scene {
    let mut cloud = GaussianCloud::new(0);
    for _ in 0..n {
        let pos = Vector3::new(
            rng.gen_range(0.0..width as f64),
            rng.gen_range(0.0..height as f64),
            rng.gen_range(1.0..5.0),
        );
        let ls = Vector3::new(
            rng.gen_range(1.0f64..6.0).ln(),
            rng.gen_range(1.0f64..6.0).ln(),
            rng.gen_range(1.0f64..6.0).ln(),
        );
        cloud.push(random_row(rng, pos, ls, 0));
    }
    Scene {
        cloud,
        view: View::Identity { width, height },
        target: random_target(rng, width, height),
        background: [rng.gen(), rng.gen(), rng.gen()],
    }
}

/// Gaussians in a unit cube seen by a random camera on a sphere of radius 4.
pub fn random_camera_scene(
    rng: &mut impl Rng,
    n: usize,
    width: usize,
    height: usize,
    sh_degree: usize,
) -> Scene {
    let dir: Vector3<f64> = loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let len = v.norm();
        if len > 0.2 && len <= 1.0 {
            break v / len;
        }
    };
    let up = if dir.z.abs() > 0.9 { Vector3::x() } else { Vector3::z() };
    let camera = Camera::look_at(dir * 4.0, Vector3::zeros(), up, 50f64.to_radians(), width, height)
        .expect("valid look-at camera");
    let mut cloud = GaussianCloud::new(sh_degree);
    for _ in 0..n {
        let pos = Vector3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8));
        let ls = Vector3::new(
            rng.gen_range(0.04f64..0.3).ln(),
            rng.gen_range(0.04f64..0.3).ln(),
            rng.gen_range(0.04f64..0.3).ln(),
        );
        cloud.push(random_row(rng, pos, ls, sh_degree));
    }
    Scene {
        cloud,
        view: View::Camera(camera),
        target: random_target(rng, width, height),
        background: [rng.gen(), rng.gen(), rng.gen()],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Param {
    Position(usize, usize),
    LogScale(usize, usize),
    Rotation(usize, usize),
    OpacityLogit(usize),
    /// Gaussian, coefficient, channel.
    Color(usize, usize, usize),
    /// Screen-space mean of a projected Gaussian (by source id).
    ViewMean(usize, usize),
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Smallest step tried when a kink sits inside the stencil.
    pub min_step: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-3,
            abs_floor: 1e-7,
            min_step: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ParamCheck {
    pub param: Param,
    pub analytic: f64,
    pub numeric: f64,
    pub step: f64,
    pub pass: bool,
}

impl ParamCheck {
    pub fn rel_error(&self) -> f64 {
        let d = (self.analytic - self.numeric).abs();
        let s = self.analytic.abs().max(self.numeric.abs());
        if s == 0.0 {
            0.0
        } else {
            d / s
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checks: Vec<ParamCheck>,
    /// Parameters whose stencil straddled a kink even at `min_step`.
    pub skipped: Vec<Param>,
}

impl GradCheckReport {
    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    /// Largest relative error among checks above the absolute floor.
    pub fn max_rel_error(&self, abs_floor: f64) -> f64 {
        self.checks
            .iter()
            .filter(|c| (c.analytic - c.numeric).abs() > abs_floor)
            .map(ParamCheck::rel_error)
            .fold(0.0, f64::max)
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checks.extend(other.checks);
        self.skipped.extend(other.skipped);
    }
}

/// Loss plus a fingerprint of every discrete decision the forward pass made.
fn evaluate(projected: &[ProjectedGaussian], scene: &Scene) -> Result<(f64, Vec<i64>)> {
    let (w, h) = (scene.view.width(), scene.view.height());
    let (img, art) = render(projected, w, h, scene.background)?;
    let (value, grad) = loss::l1(&img, &scene.target)?;
    let mut sig = Vec::new();
    for p in projected {
        sig.push(p.source as i64);
        for c in 0..3 {
            sig.push((p.rgb[c] > 0.0) as i64);
        }
    }
    for y in 0..h {
        for x in 0..w {
            for c in pixel_contributions(projected, &art, x, y) {
                let clamped = projected[c.index].raw_alpha_at([x as f64 + 0.5, y as f64 + 0.5]).0 >= ALPHA_MAX;
                sig.push(2 * projected[c.index].source as i64 + clamped as i64);
            }
            sig.push(-1);
            let g = grad.get(x, y);
            sig.push(g.iter().fold(0, |a, &v| 3 * a + (v > 0.0) as i64 - (v < 0.0) as i64 + 1));
        }
    }
    Ok((value, sig))
}

fn perturbed(scene: &Scene, param: Param, delta: f64) -> Vec<ProjectedGaussian> {
    let mut cloud = scene.cloud.clone();
    match param {
        Param::Position(i, c) => cloud.positions[i][c] += delta,
        Param::LogScale(i, c) => cloud.log_scales[i][c] += delta,
        Param::Rotation(i, c) => cloud.rotations[i][c] += delta,
        Param::OpacityLogit(i) => cloud.opacity_logits[i] += delta,
        Param::Color(i, k, c) => cloud.coeffs_mut(i)[k][c] += delta,
        Param::ViewMean(i, c) => {
            let mut p = scene.view.project(&cloud);
            for g in p.iter_mut().filter(|g| g.source == i) {
                g.mean2d[c] += delta;
            }
            return p;
        }
    }
    scene.view.project(&cloud)
}

/// Every parameter of the cloud plus the view-space mean of every projected
/// Gaussian.
pub fn all_params(scene: &Scene) -> Vec<Param> {
    let cloud = &scene.cloud;
    let k = cloud.coeffs_per_gaussian();
    let mut out = Vec::new();
    for i in 0..cloud.len() {
        out.extend((0..3).map(|c| Param::Position(i, c)));
        out.extend((0..3).map(|c| Param::LogScale(i, c)));
        out.extend((0..4).map(|c| Param::Rotation(i, c)));
        out.push(Param::OpacityLogit(i));
        for kk in 0..k {
            out.extend((0..3).map(|c| Param::Color(i, kk, c)));
        }
    }
    for p in scene.view.project(cloud) {
        out.extend((0..2).map(|c| Param::ViewMean(p.source, c)));
    }
    out
}

/// Compares the analytic gradient of every parameter in `params` against
/// central differences.
pub fn check_params(scene: &Scene, params: &[Param], config: &GradCheckConfig) -> Result<GradCheckReport> {
    let projected = scene.view.project(&scene.cloud);
    let (img, art) = render(&projected, scene.view.width(), scene.view.height(), scene.background)?;
    let (_, image_grad) = loss::l1(&img, &scene.target)?;
    let grads = backward(&scene.cloud, &scene.view, &projected, &art, &image_grad)?;
    let (_, base_sig) = evaluate(&projected, scene)?;
    let k = scene.cloud.coeffs_per_gaussian();

    let mut report = GradCheckReport::default();
    for &param in params {
        let analytic = match param {
            Param::Position(i, c) => grads.d_positions[i][c],
            Param::LogScale(i, c) => grads.d_log_scales[i][c],
            Param::Rotation(i, c) => grads.d_rotations[i][c],
            Param::OpacityLogit(i) => grads.d_opacity_logits[i],
            Param::Color(i, kk, c) => grads.d_color_coeffs[i * k + kk][c],
            Param::ViewMean(i, c) => grads.signed_view2d[i][c],
        };
        let mut step = config.step;
        let mut result = None;
        while step >= config.min_step {
            let (lp, sp) = evaluate(&perturbed(scene, param, step), scene)?;
            let (lm, sm) = evaluate(&perturbed(scene, param, -step), scene)?;
            if sp == base_sig && sm == base_sig {
                result = Some(((lp - lm) / (2.0 * step), step));
                break;
            }
            step /= 10.0;
        }
        match result {
            Some((numeric, step)) => {
                let d = (analytic - numeric).abs();
                let pass = d <= config.abs_floor
                    || d <= config.rel_tol * analytic.abs().max(numeric.abs());
                report.checks.push(ParamCheck {
                    param,
                    analytic,
                    numeric,
                    step,
                    pass,
                });
            }
            None => report.skipped.push(param),
        }
    }
    Ok(report)
}

pub fn check_scene(scene: &Scene, config: &GradCheckConfig) -> Result<GradCheckReport> {
    check_params(scene, &all_params(scene), config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_clean(report: &GradCheckReport) {
        let fails = report.failures();
        assert!(fails.is_empty(), "{:?}", &fails[..fails.len().min(5)]);
        assert!(report.skipped.len() * 50 <= report.checks.len().max(1), "{} skipped", report.skipped.len());
    }

    #[test]
    fn identity_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let scene = random_identity_scene(&mut rng, 8, 24, 20);
            assert_clean(&check_scene(&scene, &GradCheckConfig::default()).unwrap());
        }
    }

    #[test]
    fn camera_scenes_with_view_dependent_color() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for degree in [0, 1, 3] {
            let scene = random_camera_scene(&mut rng, 6, 24, 20, degree);
            let report = check_scene(&scene, &GradCheckConfig::default()).unwrap();
            assert!(report.checks.iter().any(|c| c.analytic != 0.0));
            assert_clean(&report);
        }
    }
}
