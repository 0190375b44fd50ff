//! Procedural targets for experiments and tests.

use std::f64::consts::PI;

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::error::Result;
use crate::gaussian::{logit, GaussianCloud, GaussianRow};
use crate::image::Image;
use crate::project::View;
use crate::raster::render_view;
use crate::sh;

/// Smooth value noise with lattice spacing `period` pixels.
struct ValueNoise {
    period: f64,
    cols: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, width: usize, height: usize, period: f64) -> Self {
        let cols = (width as f64 / period).ceil() as usize + 2;
        let rows = (height as f64 / period).ceil() as usize + 2;
        Self {
            period,
            cols,
            lattice: (0..cols * rows).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (u, v) = (x / self.period, y / self.period);
        let (i, j) = (u.floor() as usize, v.floor() as usize);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (s(u.fract()), s(v.fract()));
        let l = |a: usize, b: usize| self.lattice[b * self.cols + a];
        let top = l(i, j) * (1.0 - fx) + l(i + 1, j) * fx;
        let bot = l(i, j + 1) * (1.0 - fx) + l(i + 1, j + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Colored multi-octave noise: a smooth base everywhere plus fine detail
/// (2-8 px features) whose strength varies smoothly across the image, so the
/// target has both flat and high-frequency regions.
pub fn noise_texture(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<ValueNoise> = (0..3).map(|_| ValueNoise::new(&mut rng, width, height, 48.0)).collect();
    let detail: Vec<Vec<ValueNoise>> = (0..3)
        .map(|_| [8.0, 4.0, 2.0].iter().map(|&p| ValueNoise::new(&mut rng, width, height, p)).collect())
        .collect();
    let mask = ValueNoise::new(&mut rng, width, height, 64.0);
    Image::from_fn(width, height, |x, y| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let m = (0.5 + 0.9 * mask.at(fx, fy)).clamp(0.0, 1.0);
        [0, 1, 2].map(|c| {
            let d: f64 = detail[c].iter().zip([0.5, 0.35, 0.25]).map(|(n, w)| w * n.at(fx, fy)).sum();
            (0.5 + 0.25 * base[c].at(fx, fy) + 0.45 * m * d).clamp(0.0, 1.0)
        })
    })
}

/// A flower-like test photo: petals with radial veins over a foliage
/// background. Stands in for a natural image.
pub fn flower_image(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaves = ValueNoise::new(&mut rng, width, height, 9.0);
    let fine = ValueNoise::new(&mut rng, width, height, 3.0);
    let (cx, cy) = (width as f64 * 0.55, height as f64 * 0.48);
    let size = width.min(height) as f64 * 0.42;
    Image::from_fn(width, height, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (dx, dy) = (px - cx, py - cy);
        let r = dx.hypot(dy) / size;
        let th = dy.atan2(dx);
        let petal = 0.55 + 0.45 * (5.0 * th).cos().abs().powf(0.7);
        let n = leaves.at(px, py);
        let f = fine.at(px, py);
        if r < 0.22 {
            // seed head
            let dots = (0.5 + 0.5 * (40.0 * r).sin() * (9.0 * th).cos()).clamp(0.0, 1.0);
            [0.55 + 0.3 * dots + 0.05 * f, 0.35 + 0.2 * dots, 0.05 + 0.05 * f]
        } else if r < petal {
            let vein = 0.85 + 0.15 * (30.0 * th).cos();
            let shade = (1.0 - 0.5 * r) * vein + 0.05 * f;
            [0.95 * shade, 0.45 * shade + 0.1 * r, 0.65 * shade]
        } else {
            let g = 0.35 + 0.2 * n + 0.08 * f;
            let stem = (-(px - cx + 0.3 * (py - cy)).powi(2) / 6.0).exp() * (py > cy) as i32 as f64;
            [0.12 + 0.1 * n + 0.2 * stem, g + 0.25 * stem, 0.1 + 0.05 * (n * PI).sin()]
        }
        .map(|v| v.clamp(0.0, 1.0))
    })
}

/// Stratified grid initialization over an image: means at cell centers,
/// isotropic scale twice the cell size, opacity 0.5 and the cell's mean
/// color.
pub fn grid_init(image: &Image, n: usize) -> GaussianCloud {
    let (w, h) = (image.width as f64, image.height as f64);
    let n = n.max(1);
    let gx = ((n as f64 * w / h).sqrt().round() as usize).clamp(1, n);
    let gy = n.div_ceil(gx);
    let (cw, ch) = (w / gx as f64, h / gy as f64);
    let cell = (cw * ch).sqrt();
    let mut cloud = GaussianCloud::new(0);
    for j in 0..gy {
        for i in 0..gx {
            if cloud.len() == n {
                break;
            }
            let (x0, x1) = ((i as f64 * cw) as usize, (((i + 1) as f64 * cw) as usize).min(image.width));
            let (y0, y1) = ((j as f64 * ch) as usize, (((j + 1) as f64 * ch) as usize).min(image.height));
            let mut sum = [0.0; 3];
            let mut count = 0.0;
            for y in y0..y1.max(y0 + 1).min(image.height) {
                for x in x0..x1.max(x0 + 1).min(image.width) {
                    let p = image.get(x, y);
                    (0..3).for_each(|c| sum[c] += p[c]);
                    count += 1.0;
                }
            }
            cloud.push(GaussianRow {
                position: Vector3::new((i as f64 + 0.5) * cw, (j as f64 + 0.5) * ch, 1.0),
                log_scale: Vector3::repeat((2.0 * cell).ln()),
                rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
                opacity_logit: 0.0,
                coeffs: vec![sum.map(|s| sh::dc_from_color(s / count))],
            });
        }
    }
    cloud
}

/// One Gaussian centered on the image, sigma a quarter of the shorter side,
/// opacity 0.5 and the image's mean color.
pub fn single_gaussian_init(image: &Image) -> GaussianCloud {
    let n = image.pixels.len() as f64;
    let mean = image
        .pixels
        .iter()
        .fold([0.0; 3], |a, p| [a[0] + p[0], a[1] + p[1], a[2] + p[2]])
        .map(|s| s / n);
    let mut cloud = GaussianCloud::new(0);
    cloud.push(GaussianRow {
        position: Vector3::new(image.width as f64 / 2.0, image.height as f64 / 2.0, 1.0),
        log_scale: Vector3::repeat((image.width.min(image.height) as f64 / 4.0).ln()),
        rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
        opacity_logit: 0.0,
        coeffs: vec![mean.map(sh::dc_from_color)],
    });
    cloud
}

/// Multi-view synthetic scene: ground truth, training views and a sparse
/// initial cloud.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub truth: GaussianCloud,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub init: GaussianCloud,
    pub background: [f64; 3],
}

/// A textured ground plane with a textured box on it, built from small
/// Gaussians and seen by `views` cameras on an arc. The initial cloud is a
/// sparse jittered subset of the surface with inflated scales and gray
/// color (isotropic world scale `init_scale`), standing in for a
/// structure-from-motion point cloud.
pub fn textured_scene(views: usize, size: usize, init_points: usize, init_scale: f64, seed: u64) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = noise_texture(128, 128, seed ^ 0x5eed);
    let mut truth = GaussianCloud::new(0);
    let mut surface = Vec::new();
    let step = 0.025;
    let flat = |s: f64| Vector3::new(s.ln(), s.ln(), (s * 0.15).ln());
    // ground plane z = 0 over [-1, 1]^2
    let cells = (2.0 / step) as usize;
    for j in 0..cells {
        for i in 0..cells {
            let (u, v) = ((i as f64 + 0.5) / cells as f64, (j as f64 + 0.5) / cells as f64);
            let p = Vector3::new(-1.0 + 2.0 * u, -1.0 + 2.0 * v, 0.0);
            let c = tex.get((u * 127.0) as usize, (v * 127.0) as usize);
            surface.push((p, Vector4::new(1.0, 0.0, 0.0, 0.0), c));
        }
    }
    // box [-0.35, 0.35]^2 x [0, 0.5], side faces x = +-0.35 and top
    let half = 0.35;
    let faces = (2.0 * half / step) as usize;
    let hs = (0.5 / step) as usize;
    let side = Vector4::new(std::f64::consts::FRAC_1_SQRT_2, 0.0, std::f64::consts::FRAC_1_SQRT_2, 0.0);
    let front = Vector4::new(std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2, 0.0, 0.0);
    for a in 0..faces {
        let t = -half + (a as f64 + 0.5) * step;
        for b in 0..hs {
            let z = (b as f64 + 0.5) * step;
            let (tu, tv) = ((a * 127 / faces.max(1)), (b * 127 / hs.max(1)));
            for sgn in [-1.0, 1.0] {
                let c = tex.get(tu, 127 - tv);
                surface.push((Vector3::new(sgn * half, t, z), side, c.map(|v| 0.8 * v)));
                let c = tex.get(127 - tu, tv);
                surface.push((Vector3::new(t, sgn * half, z), front, c.map(|v| 0.9 * v)));
            }
        }
        for b in 0..faces {
            let t2 = -half + (b as f64 + 0.5) * step;
            let c = tex.get(a * 127 / faces, b * 127 / faces);
            surface.push((Vector3::new(t, t2, 0.5), Vector4::new(1.0, 0.0, 0.0, 0.0), c.map(|v| 1.0 - 0.7 * v)));
        }
    }
    for (p, q, c) in &surface {
        truth.push(GaussianRow {
            position: *p,
            log_scale: flat(step * 0.6),
            rotation: *q,
            opacity_logit: logit(0.95),
            coeffs: vec![c.map(sh::dc_from_color)],
        });
    }

    let mut cameras = Vec::new();
    for k in 0..views {
        let a = -0.6 + 1.2 * k as f64 / (views.max(2) - 1) as f64 + 0.3;
        let eye = Vector3::new(1.6 * a.cos(), 1.6 * a.sin(), 1.3);
        cameras.push(Camera::look_at(eye, Vector3::new(0.0, 0.0, 0.15), Vector3::z(), 55f64.to_radians(), size, size)?);
    }
    let background = [0.0; 3];
    let images = cameras
        .iter()
        .map(|c| Ok(render_view(&truth, &View::Camera(c.clone()), background)?.1))
        .collect::<Result<Vec<_>>>()?;

    let mut init = GaussianCloud::new(0);
    for _ in 0..init_points {
        let (p, _, _) = surface[rng.gen_range(0..surface.len())];
        let jitter = Vector3::from_fn(|_, _| rng.gen_range(-0.02..0.02));
        init.push(GaussianRow {
            position: p + jitter,
            log_scale: Vector3::repeat(init_scale.ln()),
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: logit(0.1),
            coeffs: vec![[sh::dc_from_color(0.5); 3]],
        });
    }
    Ok(SyntheticScene {
        truth,
        cameras,
        images,
        init,
        background,
    })
}
