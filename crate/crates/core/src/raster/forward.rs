use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::project::ProjectedGaussian;

pub const TILE_SIZE: usize = 16;
/// Upper clamp on per-contribution alpha.
pub const ALPHA_MAX: f64 = 0.99;
/// Blending for a pixel stops once transmittance would drop below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

/// Everything the backward pass needs to replay a forward render.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderArtifacts {
    pub width: usize,
    pub height: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Span of `contributors` belonging to each tile, row-major tile order.
    pub tile_ranges: Vec<Range<usize>>,
    /// Indices into the projected list, depth sorted within each tile.
    pub contributors: Vec<u32>,
    pub final_transmittance: Vec<f64>,
    /// Per pixel, how many entries of its tile list were consumed before
    /// blending terminated.
    pub contributor_count: Vec<u32>,
    /// Length of the projected list these artifacts were built from.
    pub num_projected: usize,
    pub background: [f64; 3],
}

impl RenderArtifacts {
    pub fn tile_of(&self, x: usize, y: usize) -> usize {
        (y / TILE_SIZE) * self.tiles_x + x / TILE_SIZE
    }
}

/// One blended term at a pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    /// Index into the projected list.
    pub index: usize,
    pub alpha: f64,
    /// Transmittance in front of this contribution.
    pub transmittance: f64,
}

/// Global blend order: depth, then source index.
pub fn depth_order(projected: &[ProjectedGaussian]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..projected.len()).collect();
    order.sort_by(|&a, &b| {
        projected[a]
            .depth
            .total_cmp(&projected[b].depth)
            .then(projected[a].source.cmp(&projected[b].source))
    });
    order
}

#[inline]
pub(crate) fn pixel_center(x: usize, y: usize) -> [f64; 2] {
    [x as f64 + 0.5, y as f64 + 0.5]
}

#[inline]
pub(crate) fn clamped_alpha(raw: f64) -> f64 {
    raw.min(ALPHA_MAX)
}

/// Front-to-back blend of `list` at pixel `p`. Returns the accumulated color
/// (without background), final transmittance and number of list entries
/// consumed.
#[inline]
fn blend<I>(projected: &[ProjectedGaussian], list: I, p: [f64; 2]) -> ([f64; 3], f64, u32)
where
    I: IntoIterator<Item = usize>,
{
    let mut color = [0.0; 3];
    let mut t = 1.0;
    let mut consumed = 0u32;
    for (k, idx) in list.into_iter().enumerate() {
        let g = &projected[idx];
        let Some((raw, _, _)) = g.visible_alpha_at(p) else {
            continue;
        };
        let alpha = clamped_alpha(raw);
        let next_t = t * (1.0 - alpha);
        if next_t < MIN_TRANSMITTANCE {
            break;
        }
        let w = alpha * t;
        for c in 0..3 {
            color[c] += g.rgb[c] * w;
        }
        t = next_t;
        consumed = k as u32 + 1;
    }
    (color, t, consumed)
}

fn check_viewport(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::EmptyViewport);
    }
    Ok(())
}

/// Bins the depth-ordered list into 16x16 tiles.
pub fn bin_tiles(
    projected: &[ProjectedGaussian],
    width: usize,
    height: usize,
) -> (usize, usize, Vec<Range<usize>>, Vec<u32>) {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let order = depth_order(projected);
    let rects: Vec<_> = order
        .iter()
        .map(|&i| {
            projected[i].pixel_rect(width, height).map(|(x0, x1, y0, y1)| {
                (x0 / TILE_SIZE, x1 / TILE_SIZE, y0 / TILE_SIZE, y1 / TILE_SIZE)
            })
        })
        .collect();

    let mut counts = vec![0usize; tiles_x * tiles_y];
    for r in rects.iter().flatten() {
        for ty in r.2..=r.3 {
            for tx in r.0..=r.1 {
                counts[ty * tiles_x + tx] += 1;
            }
        }
    }
    let mut ranges = Vec::with_capacity(counts.len());
    let mut start = 0;
    for &c in &counts {
        ranges.push(start..start + c);
        start += c;
    }
    let mut cursor: Vec<usize> = ranges.iter().map(|r| r.start).collect();
    let mut contributors = vec![0u32; start];
    for (&i, r) in order.iter().zip(&rects) {
        if let Some(r) = r {
            for ty in r.2..=r.3 {
                for tx in r.0..=r.1 {
                    let t = ty * tiles_x + tx;
                    contributors[cursor[t]] = i as u32;
                    cursor[t] += 1;
                }
            }
        }
    }
    (tiles_x, tiles_y, ranges, contributors)
}

/// Pixel rectangle covered by tile `t`.
pub(crate) fn tile_pixels(
    t: usize,
    tiles_x: usize,
    width: usize,
    height: usize,
) -> (Range<usize>, Range<usize>) {
    let (tx, ty) = (t % tiles_x, t / tiles_x);
    let xs = tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(width);
    let ys = ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(height);
    (xs, ys)
}

/// Tiled front-to-back rasterization. Tiles are rendered in parallel; the
/// output does not depend on the number of worker threads.
pub fn render(
    projected: &[ProjectedGaussian],
    width: usize,
    height: usize,
    background: [f64; 3],
) -> Result<(Image, RenderArtifacts)> {
    check_viewport(width, height)?;
    let (tiles_x, tiles_y, tile_ranges, contributors) = bin_tiles(projected, width, height);

    let tiles: Vec<Vec<([f64; 3], f64, u32)>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|t| {
            let (xs, ys) = tile_pixels(t, tiles_x, width, height);
            let list = &contributors[tile_ranges[t].clone()];
            let mut out = Vec::with_capacity(xs.len() * ys.len());
            for y in ys {
                for x in xs.clone() {
                    out.push(blend(
                        projected,
                        list.iter().map(|&i| i as usize),
                        pixel_center(x, y),
                    ));
                }
            }
            out
        })
        .collect();

    let mut image = Image::filled(width, height, [0.0; 3]);
    let mut final_transmittance = vec![0.0; width * height];
    let mut contributor_count = vec![0u32; width * height];
    for (t, pixels) in tiles.into_iter().enumerate() {
        let (xs, ys) = tile_pixels(t, tiles_x, width, height);
        let mut it = pixels.into_iter();
        for y in ys {
            for x in xs.clone() {
                let (c, tr, n) = it.next().expect("tile pixel count");
                let k = y * width + x;
                image.pixels[k] = [
                    c[0] + tr * background[0],
                    c[1] + tr * background[1],
                    c[2] + tr * background[2],
                ];
                final_transmittance[k] = tr;
                contributor_count[k] = n;
            }
        }
    }

    Ok((
        image,
        RenderArtifacts {
            width,
            height,
            tiles_x,
            tiles_y,
            tile_ranges,
            contributors,
            final_transmittance,
            contributor_count,
            num_projected: projected.len(),
            background,
        },
    ))
}

/// Reference renderer: every pixel walks the whole depth-sorted list.
pub fn render_naive(
    projected: &[ProjectedGaussian],
    width: usize,
    height: usize,
    background: [f64; 3],
) -> Result<Image> {
    check_viewport(width, height)?;
    let order = depth_order(projected);
    Ok(Image::from_fn(width, height, |x, y| {
        let (c, t, _) = blend(projected, order.iter().copied(), pixel_center(x, y));
        [
            c[0] + t * background[0],
            c[1] + t * background[1],
            c[2] + t * background[2],
        ]
    }))
}

/// Replays the blend at pixel `(x, y)` and appends each blended term to
/// `out` in front-to-back order.
pub fn pixel_contributions_into(
    projected: &[ProjectedGaussian],
    artifacts: &RenderArtifacts,
    x: usize,
    y: usize,
    out: &mut Vec<Contribution>,
) {
    out.clear();
    let tile = artifacts.tile_of(x, y);
    let list = &artifacts.contributors[artifacts.tile_ranges[tile].clone()];
    let n = artifacts.contributor_count[y * artifacts.width + x] as usize;
    let p = pixel_center(x, y);
    let mut t = 1.0;
    for &idx in &list[..n] {
        let g = &projected[idx as usize];
        let Some((raw, _, _)) = g.visible_alpha_at(p) else {
            continue;
        };
        let alpha = clamped_alpha(raw);
        out.push(Contribution {
            index: idx as usize,
            alpha,
            transmittance: t,
        });
        t *= 1.0 - alpha;
    }
}

pub fn pixel_contributions(
    projected: &[ProjectedGaussian],
    artifacts: &RenderArtifacts,
    x: usize,
    y: usize,
) -> Vec<Contribution> {
    let mut out = Vec::new();
    pixel_contributions_into(projected, artifacts, x, y, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::logit;

    fn splat(mean: [f64; 2], sigma: f64, depth: f64, rgb: [f64; 3], opacity: f64, source: usize) -> ProjectedGaussian {
        let v = sigma * sigma;
        let level = 2.0 * (opacity * 255.0).ln();
        ProjectedGaussian {
            mean2d: mean,
            conic: [1.0 / v, 0.0, 1.0 / v],
            depth,
            rgb,
            opacity,
            radius: 3.0 * sigma,
            extent: [(level * v).sqrt() + 1e-6, (level * v).sqrt() + 1e-6],
            level,
            source,
        }
    }

    #[test]
    fn empty_list_is_background() {
        let (img, art) = render(&[], 20, 10, [0.2, 0.4, 0.6]).unwrap();
        assert!(img.pixels.iter().all(|p| *p == [0.2, 0.4, 0.6]));
        assert!(art.final_transmittance.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn zero_area_is_an_error() {
        assert!(matches!(render(&[], 0, 10, [0.0; 3]), Err(Error::EmptyViewport)));
        assert!(matches!(render_naive(&[], 4, 0, [0.0; 3]), Err(Error::EmptyViewport)));
    }

    #[test]
    fn single_term_at_center_clamps() {
        let op = crate::gaussian::sigmoid(logit(0.999));
        let g = splat([5.5, 5.5], 2.0, 1.0, [1.0, 0.5, 0.25], op, 0);
        let bg = [0.1, 0.2, 0.3];
        let (img, _) = render(&[g.clone()], 11, 11, bg).unwrap();
        let px = img.get(5, 5);
        for c in 0..3 {
            let want = 0.99 * g.rgb[c] + 0.01 * bg[c];
            assert!((px[c] - want).abs() < 1e-15);
        }
        assert_eq!(render_naive(&[g], 11, 11, bg).unwrap(), img);
    }

    #[test]
    fn transparent_gaussians_leave_background() {
        let gs: Vec<_> = (0..5)
            .map(|i| splat([8.0, 8.0], 3.0, i as f64, [1.0; 3], 1e-6, i))
            .collect();
        let img = render_naive(&gs, 16, 16, [0.3; 3]).unwrap();
        assert!(img.pixels.iter().all(|p| *p == [0.3; 3]));
    }

    #[test]
    fn tiles_cover_every_pixel_once() {
        let (tx, ty) = (3, 2);
        let (w, h) = (40, 20);
        let mut seen = vec![0; w * h];
        for t in 0..tx * ty {
            let (xs, ys) = tile_pixels(t, tx, w, h);
            for y in ys {
                for x in xs.clone() {
                    seen[y * w + x] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn equal_depth_ties_break_by_source() {
        let a = splat([4.0, 4.0], 2.0, 1.0, [1.0, 0.0, 0.0], 0.8, 1);
        let b = splat([4.0, 4.0], 2.0, 1.0, [0.0, 1.0, 0.0], 0.8, 0);
        let order = depth_order(&[a, b]);
        assert_eq!(order, vec![1, 0]);
    }

    fn random_projected(seed: u64, n: usize, w: usize, h: usize) -> Vec<ProjectedGaussian> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let scene = crate::gradcheck::random_identity_scene(&mut rng, n, w, h);
        scene.view.project(&scene.cloud)
    }

    #[test]
    fn tiled_matches_naive() {
        for seed in 0..6 {
            let p = random_projected(seed, 60, 70, 45);
            let (tiled, _) = render(&p, 70, 45, [0.1, 0.5, 0.9]).unwrap();
            assert_eq!(tiled, render_naive(&p, 70, 45, [0.1, 0.5, 0.9]).unwrap());
        }
    }

    #[test]
    fn weights_and_transmittance_sum_to_one() {
        let p = random_projected(7, 80, 40, 40);
        let bg = [0.3, 0.2, 0.1];
        let (img, art) = render(&p, 40, 40, bg).unwrap();
        for y in 0..40 {
            for x in 0..40 {
                let terms = pixel_contributions(&p, &art, x, y);
                let t_final = art.final_transmittance[y * 40 + x];
                let wsum: f64 = terms.iter().map(|c| c.alpha * c.transmittance).sum();
                assert!((wsum + t_final - 1.0).abs() < 1e-12);
                // convex combination of contributor colors and background
                for c in 0..3 {
                    let lo = terms.iter().map(|t| p[t.index].rgb[c]).fold(bg[c], f64::min);
                    let hi = terms.iter().map(|t| p[t.index].rgb[c]).fold(bg[c], f64::max);
                    let v = img.get(x, y)[c];
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn render_is_independent_of_thread_count() {
        let p = random_projected(8, 100, 64, 50);
        let run = |n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap()
                .install(|| render(&p, 64, 50, [0.0; 3]).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
