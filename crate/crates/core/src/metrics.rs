//! PSNR and SSIM.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
//! dynamic range 1, valid-region convolution only, averaged over channels.

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let n = (a.pixels.len() * 3) as f64;
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / n)
}

/// `10 log10(1 / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * m.log10())
}

/// Formats PSNR for logs and CSVs; infinity prints as `inf`.
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Plane of one scalar per pixel.
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

fn blur_valid(p: &Plane, k: &[f64; SSIM_WINDOW]) -> Plane {
    let n = SSIM_WINDOW;
    let ow = p.w + 1 - n;
    let oh = p.h + 1 - n;
    let mut tmp = vec![0.0; ow * p.h];
    for y in 0..p.h {
        let row = &p.v[y * p.w..(y + 1) * p.w];
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * row[x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    Plane { w: ow, h: oh, v: out }
}

/// Adjoint of `blur_valid`: scatters a valid-sized plane back to full size.
fn blur_valid_adjoint(p: &Plane, k: &[f64; SSIM_WINDOW], w: usize, h: usize) -> Plane {
    let n = SSIM_WINDOW;
    let mut tmp = vec![0.0; p.w * h];
    for y in 0..p.h {
        for x in 0..p.w {
            let v = p.v[y * p.w + x];
            for i in 0..n {
                tmp[(y + i) * p.w + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..p.w {
            let v = tmp[y * p.w + x];
            for i in 0..n {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    Plane { w, h, v: out }
}

fn channel(img: &Image, c: usize) -> Plane {
    Plane {
        w: img.width,
        h: img.height,
        v: img.pixels.iter().map(|p| p[c]).collect(),
    }
}

fn check_ssim(a: &Image, b: &Image) -> Result<()> {
    check_same(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: a.width,
            height: a.height,
            window: SSIM_WINDOW,
        });
    }
    Ok(())
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check_ssim(a, b)?;
    let k = gaussian_window();
    let (w, h) = (a.width, a.height);
    let mut total = 0.0;
    let mut windows = 0;
    let mut grad = want_grad.then(|| Image::filled(w, h, [0.0; 3]));
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let sq = |p: &Plane, q: &Plane| Plane {
            w,
            h,
            v: p.v.iter().zip(&q.v).map(|(u, v)| u * v).collect(),
        };
        let mx = blur_valid(&x, &k);
        let my = blur_valid(&y, &k);
        let sxx = blur_valid(&sq(&x, &x), &k);
        let syy = blur_valid(&sq(&y, &y), &k);
        let sxy = blur_valid(&sq(&x, &y), &k);
        let count = mx.v.len();
        let scale = 1.0 / (3 * count) as f64;
        windows += count;

        let mut da = vec![0.0; count];
        let mut db = vec![0.0; count];
        let mut dc = vec![0.0; count];
        for i in 0..count {
            let (ux, uy) = (mx.v[i], my.v[i]);
            let vx = sxx.v[i] - ux * ux;
            let vy = syy.v[i] - uy * uy;
            let cxy = sxy.v[i] - ux * uy;
            let n1 = 2.0 * ux * uy + C1;
            let n2 = 2.0 * cxy + C2;
            let d1 = ux * ux + uy * uy + C1;
            let d2 = vx + vy + C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                let ds_dux = 2.0 * uy * n2 / (d1 * d2) - s * 2.0 * ux / d1;
                let ds_dvx = -s / d2;
                let ds_dcxy = 2.0 * n1 / (d1 * d2);
                da[i] = (ds_dux - 2.0 * ds_dvx * ux - ds_dcxy * uy) * scale;
                db[i] = ds_dvx * scale;
                dc[i] = ds_dcxy * scale;
            }
        }
        if let Some(g) = grad.as_mut() {
            let wrap = |v: Vec<f64>| Plane { w: mx.w, h: mx.h, v };
            let ga = blur_valid_adjoint(&wrap(da), &k, w, h);
            let gb = blur_valid_adjoint(&wrap(db), &k, w, h);
            let gc = blur_valid_adjoint(&wrap(dc), &k, w, h);
            for i in 0..w * h {
                g.pixels[i][c] = ga.v[i] + 2.0 * x.v[i] * gb.v[i] + y.v[i] * gc.v[i];
            }
        }
    }
    Ok((total / windows as f64, grad))
}
