//! Photometric losses and their image-space gradients.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics;

/// Mean absolute error over all pixels and channels, with the gradient
/// `sign(r - t) / (3 W H)` (zero where the residual is exactly zero).
pub fn l1(render: &Image, target: &Image) -> Result<(f64, Image)> {
    if !render.same_shape(target) {
        return Err(Error::DimensionMismatch(format!(
            "render {}x{} vs target {}x{}",
            render.width, render.height, target.width, target.height
        )));
    }
    let n = (render.pixels.len() * 3) as f64;
    let mut total = 0.0;
    let mut grad = Image::filled(render.width, render.height, [0.0; 3]);
    for ((r, t), g) in render.pixels.iter().zip(&target.pixels).zip(&mut grad.pixels) {
        for c in 0..3 {
            let d = r[c] - t[c];
            total += d.abs();
            g[c] = if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
        }
    }
    Ok((total / n, grad))
}

/// `(1 - lambda) * L1 + lambda * (1 - SSIM) / 2`. SSIM is skipped entirely
/// when `lambda == 0`, so images smaller than the SSIM window are fine then.
pub fn photometric(render: &Image, target: &Image, lambda_dssim: f64) -> Result<(f64, Image)> {
    let (l1v, mut grad) = l1(render, target)?;
    if lambda_dssim == 0.0 {
        return Ok((l1v, grad));
    }
    let (s, sg) = metrics::ssim_with_grad(render, target)?;
    let a = 1.0 - lambda_dssim;
    for (g, d) in grad.pixels.iter_mut().zip(&sg.pixels) {
        for c in 0..3 {
            g[c] = a * g[c] - 0.5 * lambda_dssim * d[c];
        }
    }
    Ok((a * l1v + lambda_dssim * (1.0 - s) / 2.0, grad))
}
