//! Analytic backward pass through blending and projection.
//!
//! Besides the ordinary parameter gradients, every per-pixel contribution
//! `dL_j/dmu_i` to the screen-space mean gradient is accumulated twice: as a
//! signed sum (`signed_view2d`) and as a componentwise sum of absolute values
//! (`homodir_view2d`). Only the signed sums feed the parameter gradients; the
//! absolute sums exist for densification.

use nalgebra::{Matrix2, Matrix3, Vector3, Vector4};
use rayon::prelude::*;

use super::forward::{clamped_alpha, pixel_center, tile_pixels, RenderArtifacts, ALPHA_MAX};
use crate::error::{Error, Result};
use crate::gaussian::{covariance_backward, GaussianCloud};
use crate::image::Image;
use crate::project::{canonical_dir, embed2, projection_jacobian, ProjectedGaussian, View};
use crate::sh;

/// Granularity at which absolute values are taken for the homodirectional
/// accumulator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AbsMode {
    /// `|sum over channels|` per pixel.
    #[default]
    Pixel,
    /// `sum over channels of |.|` per pixel.
    Channel,
}

impl std::str::FromStr for AbsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(AbsMode::Pixel),
            "channel" => Ok(AbsMode::Channel),
            _ => Err(Error::InvalidConfig(format!("unknown abs mode {s:?} (expected pixel or channel)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ViewGradients {
    pub d_positions: Vec<Vector3<f64>>,
    pub d_log_scales: Vec<Vector3<f64>>,
    pub d_rotations: Vec<Vector4<f64>>,
    pub d_opacity_logits: Vec<f64>,
    pub d_color_coeffs: Vec<[f64; 3]>,
    /// Sum over pixels of `dL_j/dmu_i`.
    pub signed_view2d: Vec<[f64; 2]>,
    /// Sum over pixels of `|dL_j/dmu_i|`, componentwise.
    pub homodir_view2d: Vec<[f64; 2]>,
    pub touched: Vec<bool>,
    /// Number of pixels the Gaussian was blended into.
    pub footprint_pixels: Vec<u32>,
    /// Screen radius in this view (0 when not projected).
    pub screen_radius: Vec<f64>,
    /// Pixels per NDC unit along x and y: `(W/2, H/2)`.
    pub ndc_scale: [f64; 2],
}

impl ViewGradients {
    pub fn zeros(n: usize, coeffs_per_gaussian: usize) -> Self {
        Self {
            d_positions: vec![Vector3::zeros(); n],
            d_log_scales: vec![Vector3::zeros(); n],
            d_rotations: vec![Vector4::zeros(); n],
            d_opacity_logits: vec![0.0; n],
            d_color_coeffs: vec![[0.0; 3]; n * coeffs_per_gaussian],
            signed_view2d: vec![[0.0; 2]; n],
            homodir_view2d: vec![[0.0; 2]; n],
            touched: vec![false; n],
            footprint_pixels: vec![0; n],
            screen_radius: vec![0.0; n],
            ndc_scale: [1.0, 1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.touched.len()
    }

    pub fn is_empty(&self) -> bool {
        self.touched.is_empty()
    }

    pub fn signed_norm(&self, i: usize) -> f64 {
        let g = self.signed_view2d[i];
        g[0].hypot(g[1])
    }

    pub fn homodir_norm(&self, i: usize) -> f64 {
        let g = self.homodir_view2d[i];
        g[0].hypot(g[1])
    }

    /// Norm of the signed sum taken with respect to NDC coordinates, the
    /// unit the densification thresholds are expressed in.
    pub fn ndc_signed_norm(&self, i: usize) -> f64 {
        let (g, k) = (self.signed_view2d[i], self.ndc_scale);
        (g[0] * k[0]).hypot(g[1] * k[1])
    }

    pub fn ndc_homodir_norm(&self, i: usize) -> f64 {
        let (g, k) = (self.homodir_view2d[i], self.ndc_scale);
        (g[0] * k[0]).hypot(g[1] * k[1])
    }
}

/// Dense per-pixel sub-gradient `dL_j/dmu` for one Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGradientMap {
    pub width: usize,
    pub height: usize,
    pub source: usize,
    pub values: Vec<[f64; 2]>,
}

impl PixelGradientMap {
    pub fn sum(&self) -> [f64; 2] {
        self.values
            .iter()
            .fold([0.0; 2], |a, v| [a[0] + v[0], a[1] + v[1]])
    }

    pub fn abs_sum(&self) -> [f64; 2] {
        self.values
            .iter()
            .fold([0.0; 2], |a, v| [a[0] + v[0].abs(), a[1] + v[1].abs()])
    }

    /// One component (0 = x, 1 = y) as a PFM-ready image in the red channel.
    pub fn component_image(&self, axis: usize) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.values.iter().map(|v| [v[axis], 0.0, 0.0]).collect(),
        }
    }

    /// Red for positive, green for negative, brightness proportional to
    /// magnitude normalized by the image maximum.
    pub fn sign_image(&self, axis: usize) -> Image {
        let max = self.values.iter().map(|v| v[axis].abs()).fold(0.0, f64::max);
        let norm = if max > 0.0 { 1.0 / max } else { 0.0 };
        Image {
            width: self.width,
            height: self.height,
            pixels: self
                .values
                .iter()
                .map(|v| {
                    let s = v[axis] * norm;
                    if s > 0.0 {
                        [s, 0.0, 0.0]
                    } else {
                        [0.0, -s, 0.0]
                    }
                })
                .collect(),
        }
    }

    pub fn positive_count(&self, axis: usize) -> usize {
        self.values.iter().filter(|v| v[axis] > 0.0).count()
    }

    pub fn negative_count(&self, axis: usize) -> usize {
        self.values.iter().filter(|v| v[axis] < 0.0).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BackwardOptions {
    pub abs_mode: AbsMode,
}

/// Screen-space gradient of one projected Gaussian.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct ScreenGrad {
    d_mean: [f64; 2],
    abs_mean: [f64; 2],
    d_conic: [f64; 3],
    d_opacity: f64,
    d_rgb: [f64; 3],
    pixels: u32,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for k in 0..2 {
            self.d_mean[k] += o.d_mean[k];
            self.abs_mean[k] += o.abs_mean[k];
        }
        for k in 0..3 {
            self.d_conic[k] += o.d_conic[k];
            self.d_rgb[k] += o.d_rgb[k];
        }
        self.d_opacity += o.d_opacity;
        self.pixels += o.pixels;
    }
}

/// Per-pixel, per-contributor term produced by the replay.
#[derive(Clone, Copy, Debug)]
struct PixelTerm {
    sub: [f64; 2],
    sub_abs: [f64; 2],
    d_conic: [f64; 3],
    d_opacity: f64,
    d_rgb: [f64; 3],
}

struct Replay {
    slot: usize,
    index: usize,
    alpha: f64,
    clamped: bool,
    gauss: f64,
    d: [f64; 2],
    transmittance: f64,
}

/// Walks pixel `(x, y)` back to front and reports each contributor's terms
/// through `sink(slot_in_tile, projected_index, term)`.
#[inline]
fn pixel_backward(
    projected: &[ProjectedGaussian],
    artifacts: &RenderArtifacts,
    list: &[u32],
    x: usize,
    y: usize,
    grad: [f64; 3],
    abs_mode: AbsMode,
    stack: &mut Vec<Replay>,
    mut sink: impl FnMut(usize, usize, PixelTerm),
) {
    stack.clear();
    let p = pixel_center(x, y);
    let n = artifacts.contributor_count[y * artifacts.width + x] as usize;
    let mut t = 1.0;
    for (slot, &idx) in list[..n].iter().enumerate() {
        let g = &projected[idx as usize];
        let Some((raw, gauss, d)) = g.visible_alpha_at(p) else {
            continue;
        };
        let alpha = clamped_alpha(raw);
        stack.push(Replay {
            slot,
            index: idx as usize,
            alpha,
            clamped: raw >= ALPHA_MAX,
            gauss,
            d,
            transmittance: t,
        });
        t *= 1.0 - alpha;
    }

    let mut behind = artifacts.background;
    for r in stack.iter().rev() {
        let g = &projected[r.index];
        let mut d_alpha_ch = [0.0; 3];
        let mut d_rgb = [0.0; 3];
        for c in 0..3 {
            d_alpha_ch[c] = grad[c] * r.transmittance * (g.rgb[c] - behind[c]);
            d_rgb[c] = grad[c] * r.alpha * r.transmittance;
            behind[c] = g.rgb[c] * r.alpha + (1.0 - r.alpha) * behind[c];
        }
        let d_alpha = d_alpha_ch[0] + d_alpha_ch[1] + d_alpha_ch[2];

        let mut term = PixelTerm {
            sub: [0.0; 2],
            sub_abs: [0.0; 2],
            d_conic: [0.0; 3],
            d_opacity: 0.0,
            d_rgb,
        };
        if !r.clamped {
            let [dx, dy] = r.d;
            let og = g.opacity * r.gauss;
            // d alpha / d mean = opacity * G * conic * (p - mean)
            let dir = [
                og * (g.conic[0] * dx + g.conic[1] * dy),
                og * (g.conic[1] * dx + g.conic[2] * dy),
            ];
            term.sub = [d_alpha * dir[0], d_alpha * dir[1]];
            term.sub_abs = match abs_mode {
                AbsMode::Pixel => [term.sub[0].abs(), term.sub[1].abs()],
                AbsMode::Channel => {
                    let s: f64 = d_alpha_ch.iter().map(|v| v.abs()).sum();
                    [s * dir[0].abs(), s * dir[1].abs()]
                }
            };
            term.d_conic = [
                -0.5 * d_alpha * og * dx * dx,
                -d_alpha * og * dx * dy,
                -0.5 * d_alpha * og * dy * dy,
            ];
            term.d_opacity = d_alpha * r.gauss;
        }
        sink(r.slot, r.index, term);
    }
}

fn check_inputs(
    projected: &[ProjectedGaussian],
    artifacts: &RenderArtifacts,
    image_grad: &Image,
) -> Result<()> {
    if artifacts.num_projected != projected.len() {
        return Err(Error::StaleArtifacts(format!(
            "artifacts built from {} projected gaussians, got {}",
            artifacts.num_projected,
            projected.len()
        )));
    }
    if image_grad.width != artifacts.width || image_grad.height != artifacts.height {
        return Err(Error::StaleArtifacts(format!(
            "image gradient is {}x{}, render was {}x{}",
            image_grad.width, image_grad.height, artifacts.width, artifacts.height
        )));
    }
    if image_grad.pixels.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::DimensionMismatch("image gradient is not finite".into()));
    }
    Ok(())
}

/// Screen-space gradients of every projected Gaussian; tiles run in parallel
/// and are reduced in fixed tile order.
fn screen_backward(
    projected: &[ProjectedGaussian],
    artifacts: &RenderArtifacts,
    image_grad: &Image,
    abs_mode: AbsMode,
) -> Vec<ScreenGrad> {
    let (w, h) = (artifacts.width, artifacts.height);
    let per_tile: Vec<Vec<ScreenGrad>> = (0..artifacts.tile_ranges.len())
        .into_par_iter()
        .map(|t| {
            let range = artifacts.tile_ranges[t].clone();
            let list = &artifacts.contributors[range.clone()];
            let mut slots = vec![ScreenGrad::default(); list.len()];
            if list.is_empty() {
                return slots;
            }
            let (xs, ys) = tile_pixels(t, artifacts.tiles_x, w, h);
            let mut stack = Vec::new();
            for y in ys {
                for x in xs.clone() {
                    let grad = image_grad.pixels[y * w + x];
                    pixel_backward(
                        projected,
                        artifacts,
                        list,
                        x,
                        y,
                        grad,
                        abs_mode,
                        &mut stack,
                        |slot, _, term| {
                            let s = &mut slots[slot];
                            for k in 0..2 {
                                s.d_mean[k] += term.sub[k];
                                s.abs_mean[k] += term.sub_abs[k];
                            }
                            for k in 0..3 {
                                s.d_conic[k] += term.d_conic[k];
                                s.d_rgb[k] += term.d_rgb[k];
                            }
                            s.d_opacity += term.d_opacity;
                            s.pixels += 1;
                        },
                    );
                }
            }
            slots
        })
        .collect();

    let mut out = vec![ScreenGrad::default(); projected.len()];
    for (t, slots) in per_tile.iter().enumerate() {
        let range = artifacts.tile_ranges[t].clone();
        for (slot, s) in slots.iter().enumerate() {
            if s.pixels > 0 {
                out[artifacts.contributors[range.start + slot] as usize].add(s);
            }
        }
    }
    out
}

/// Gradients of the loss with respect to every cloud parameter, plus the
/// signed and homodirectional screen-space mean gradients.
pub fn backward(
    cloud: &GaussianCloud,
    view: &View,
    projected: &[ProjectedGaussian],
    artifacts: &RenderArtifacts,
    image_grad: &Image,
) -> Result<ViewGradients> {
    backward_with(cloud, view, projected, artifacts, image_grad, BackwardOptions::default())
}

pub fn backward_with(
    cloud: &GaussianCloud,
    view: &View,
    projected: &[ProjectedGaussian],
    artifacts: &RenderArtifacts,
    image_grad: &Image,
    options: BackwardOptions,
) -> Result<ViewGradients> {
    check_inputs(projected, artifacts, image_grad)?;
    if projected.iter().any(|p| p.source >= cloud.len()) {
        return Err(Error::StaleArtifacts("projected source outside cloud".into()));
    }
    let screen = screen_backward(projected, artifacts, image_grad, options.abs_mode);

    let k = cloud.coeffs_per_gaussian();
    let chained: Vec<Option<ParamGrad>> = projected
        .par_iter()
        .zip(screen.par_iter())
        .map(|(p, s)| (s.pixels > 0).then(|| chain(cloud, view, p, s)))
        .collect();

    let mut out = ViewGradients::zeros(cloud.len(), k);
    out.ndc_scale = [0.5 * artifacts.width as f64, 0.5 * artifacts.height as f64];
    for ((p, s), g) in projected.iter().zip(&screen).zip(chained) {
        let i = p.source;
        out.screen_radius[i] = p.radius;
        let Some(g) = g else { continue };
        out.d_positions[i] = g.position;
        out.d_log_scales[i] = g.log_scale;
        out.d_rotations[i] = g.rotation;
        out.d_opacity_logits[i] = g.opacity_logit;
        out.d_color_coeffs[i * k..(i + 1) * k].copy_from_slice(&g.coeffs);
        out.signed_view2d[i] = s.d_mean;
        out.homodir_view2d[i] = s.abs_mean;
        out.touched[i] = true;
        out.footprint_pixels[i] = s.pixels;
    }
    Ok(out)
}

struct ParamGrad {
    position: Vector3<f64>,
    log_scale: Vector3<f64>,
    rotation: Vector4<f64>,
    opacity_logit: f64,
    coeffs: Vec<[f64; 3]>,
}

/// Chains one Gaussian's screen-space gradient back to its parameters.
fn chain(cloud: &GaussianCloud, view: &View, p: &ProjectedGaussian, s: &ScreenGrad) -> ParamGrad {
    let i = p.source;
    let op = p.opacity;
    let opacity_logit = s.d_opacity * op * (1.0 - op);

    // color
    let (dir, camera_center) = match view {
        View::Camera(c) => {
            let center = c.center();
            ((cloud.positions[i] - center).normalize(), Some(center))
        }
        View::Identity { .. } => (canonical_dir(), None),
    };
    let coeffs = cloud.coeffs(i);
    let raw = sh::eval_raw(coeffs, &dir, cloud.sh_degree);
    let d_color = [0, 1, 2].map(|c| if raw[c] + 0.5 > 0.0 { s.d_rgb[c] } else { 0.0 });
    let (basis, basis_grad) = sh::basis_with_grad(&dir);
    let kc = cloud.coeffs_per_gaussian();
    let d_coeffs: Vec<[f64; 3]> = (0..kc)
        .map(|k| [0, 1, 2].map(|c| d_color[c] * basis[k]))
        .collect();
    let mut d_position = Vector3::zeros();
    if let Some(center) = camera_center {
        if cloud.sh_degree > 0 {
            let mut d_dir = Vector3::zeros();
            for k in 1..kc {
                let w: f64 = (0..3).map(|c| d_color[c] * coeffs[k][c]).sum();
                d_dir += Vector3::from(basis_grad[k]) * w;
            }
            let v = cloud.positions[i] - center;
            let len = v.norm();
            d_position += (d_dir - dir * dir.dot(&d_dir)) / len;
        }
    }

    // conic -> screen covariance
    let conic = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
    let g_conic = Matrix2::new(
        s.d_conic[0],
        0.5 * s.d_conic[1],
        0.5 * s.d_conic[1],
        s.d_conic[2],
    );
    let g_cov2d = -(conic * g_conic * conic);

    let d_cov3d: Matrix3<f64> = match view {
        View::Identity { .. } => {
            d_position.x += s.d_mean[0];
            d_position.y += s.d_mean[1];
            embed2(&g_cov2d)
        }
        View::Camera(cam) => {
            let w = cam.rotation();
            let pc = cam.to_camera(&cloud.positions[i]);
            let j = projection_jacobian(cam, &pc);
            let t = j * w;
            let cov3d = cloud.covariance3d(i);
            let d_t = 2.0 * g_cov2d * t * cov3d;
            let d_j = d_t * w.transpose();

            let (fx, fy) = (cam.fx, cam.fy);
            let iz = 1.0 / pc.z;
            let iz2 = iz * iz;
            let iz3 = iz2 * iz;
            let mut d_pc = Vector3::new(
                s.d_mean[0] * fx * iz,
                s.d_mean[1] * fy * iz,
                -s.d_mean[0] * fx * pc.x * iz2 - s.d_mean[1] * fy * pc.y * iz2,
            );
            d_pc.z += d_j[(0, 0)] * (-fx * iz2);
            d_pc.x += d_j[(0, 2)] * (-fx * iz2);
            d_pc.z += d_j[(0, 2)] * (2.0 * fx * pc.x * iz3);
            d_pc.z += d_j[(1, 1)] * (-fy * iz2);
            d_pc.y += d_j[(1, 2)] * (-fy * iz2);
            d_pc.z += d_j[(1, 2)] * (2.0 * fy * pc.y * iz3);
            d_position += w.transpose() * d_pc;
            t.transpose() * g_cov2d * t
        }
    };
    let (log_scale, rotation) =
        covariance_backward(&cloud.rotations[i], &cloud.log_scales[i], &d_cov3d);

    ParamGrad {
        position: d_position,
        log_scale,
        rotation,
        opacity_logit,
        coeffs: d_coeffs,
    }
}

/// Per-pixel sub-gradient field of the screen mean of projected Gaussian
/// with source id `target`.
pub fn capture_pixel_gradients(
    projected: &[ProjectedGaussian],
    artifacts: &RenderArtifacts,
    image_grad: &Image,
    target: usize,
) -> Result<PixelGradientMap> {
    check_inputs(projected, artifacts, image_grad)?;
    let pidx = projected
        .iter()
        .position(|p| p.source == target)
        .ok_or(Error::GaussianNotInView(target))?;
    let (w, h) = (artifacts.width, artifacts.height);
    let mut values = vec![[0.0; 2]; w * h];
    let mut stack = Vec::new();
    let Some((x0, x1, y0, y1)) = projected[pidx].pixel_rect(w, h) else {
        return Err(Error::GaussianNotInView(target));
    };
    for y in y0..=y1 {
        for x in x0..=x1 {
            let tile = artifacts.tile_of(x, y);
            let list = &artifacts.contributors[artifacts.tile_ranges[tile].clone()];
            pixel_backward(
                projected,
                artifacts,
                list,
                x,
                y,
                image_grad.pixels[y * w + x],
                AbsMode::Pixel,
                &mut stack,
                |_, idx, term| {
                    if idx == pidx {
                        values[y * w + x] = term.sub;
                    }
                },
            );
        }
    }
    Ok(PixelGradientMap {
        width: w,
        height: h,
        source: target,
        values,
    })
}

/// Adds one view's NDC-unit gradient norms into the cloud's ledger.
pub fn accumulate_ledger(cloud: &mut GaussianCloud, grads: &ViewGradients) {
    let ledger = &mut cloud.ledger;
    for i in 0..grads.len() {
        if !grads.touched[i] {
            continue;
        }
        ledger.signed_accum[i] += grads.ndc_signed_norm(i);
        ledger.homodir_accum[i] += grads.ndc_homodir_norm(i);
        ledger.view_count[i] += 1;
        ledger.max_screen_radius[i] = ledger.max_screen_radius[i].max(grads.screen_radius[i]);
    }
}
