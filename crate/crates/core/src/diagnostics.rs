//! Collision statistics, gradient sign maps and the threshold sweep.

use std::cell::RefCell;
use std::collections::HashSet;
use std::path::Path;
use std::rc::Rc;

use serde::Serialize;

use crate::densify::{select, selection_mask, DensifyConfig, Strategy};
use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::image::Image;
use crate::loss;
use crate::raster::{backward, capture_pixel_gradients, render_view, PixelGradientMap};
use crate::train::{evaluate, memory_bytes, metrics_csv, MetricsRow, TrainConfig, TrainView, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GaussianCollision {
    pub id: usize,
    /// Pixels the Gaussian was blended into.
    pub footprint: u32,
    pub signed_norm: f64,
    pub homodir_norm: f64,
    /// `signed_norm / homodir_norm`, 1 when the homodirectional norm is 0.
    pub rho: f64,
    /// Per-axis `|g| / g_hat`, 1 where `g_hat` is 0.
    pub rho_components: [f64; 2],
    pub screen_radius: f64,
}

/// Collision ratios of Gaussians whose footprint falls in `[min, max]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FootprintBin {
    pub min_pixels: u32,
    pub max_pixels: u32,
    pub count: usize,
    pub mean_rho: f64,
    pub median_rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CollisionReport {
    pub view: String,
    pub loss: f64,
    pub gaussians: Vec<GaussianCollision>,
    pub footprint_bins: Vec<FootprintBin>,
    /// Ids of the largest-footprint Gaussians, largest first.
    pub top_k: Vec<usize>,
}

impl CollisionReport {
    pub fn get(&self, id: usize) -> Option<&GaussianCollision> {
        self.gaussians.iter().find(|g| g.id == id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub struct CollisionAnalysis {
    pub report: CollisionReport,
    /// Per-pixel sub-gradient fields of the `top_k` Gaussians.
    pub maps: Vec<PixelGradientMap>,
}

impl CollisionAnalysis {
    /// Writes `collision.json` plus, per mapped Gaussian, red/green sign
    /// PNGs and raw PFM fields for both axes.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("collision.json");
        std::fs::write(&json, self.report.to_json()?).map_err(|e| Error::io(&json, e))?;
        for m in &self.maps {
            for (axis, name) in [(0, "x"), (1, "y")] {
                m.sign_image(axis)
                    .save_png(&dir.join(format!("sign_{}_{name}.png", m.source)))?;
                m.component_image(axis)
                    .save_pfm(&dir.join(format!("grad_{}_{name}.pfm", m.source)))?;
            }
        }
        Ok(())
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        1.0
    }
}

fn bins(gaussians: &[GaussianCollision]) -> Vec<FootprintBin> {
    let mut out = Vec::new();
    let mut lo = 1u32;
    let max = gaussians.iter().map(|g| g.footprint).max().unwrap_or(0);
    while lo <= max {
        let hi = lo.saturating_mul(2) - 1;
        let mut rhos: Vec<f64> = gaussians
            .iter()
            .filter(|g| (lo..=hi).contains(&g.footprint))
            .map(|g| g.rho)
            .collect();
        if !rhos.is_empty() {
            rhos.sort_by(f64::total_cmp);
            let n = rhos.len();
            let median = if n % 2 == 1 {
                rhos[n / 2]
            } else {
                0.5 * (rhos[n / 2 - 1] + rhos[n / 2])
            };
            out.push(FootprintBin {
                min_pixels: lo,
                max_pixels: hi,
                count: n,
                mean_rho: rhos.iter().sum::<f64>() / n as f64,
                median_rho: median,
            });
        }
        lo = hi + 1;
    }
    out
}

/// Renders `view`, runs the backward pass of the photometric loss and
/// reports per-Gaussian collision ratios. Sign maps are captured for the
/// `top_k` Gaussians with the largest footprints.
pub fn collision_report(
    cloud: &GaussianCloud,
    view: &TrainView,
    background: [f64; 3],
    loss_lambda_dssim: f64,
    top_k: usize,
) -> Result<CollisionAnalysis> {
    let (projected, image, artifacts) = render_view(cloud, &view.view, background)?;
    let (value, image_grad) = loss::photometric(&image, &view.target, loss_lambda_dssim)?;
    let grads = backward(cloud, &view.view, &projected, &artifacts, &image_grad)?;
    let gaussians: Vec<GaussianCollision> = (0..grads.len())
        .filter(|&i| grads.touched[i])
        .map(|i| {
            let (g, h) = (grads.signed_view2d[i], grads.homodir_view2d[i]);
            GaussianCollision {
                id: i,
                footprint: grads.footprint_pixels[i],
                signed_norm: grads.signed_norm(i),
                homodir_norm: grads.homodir_norm(i),
                rho: ratio(grads.signed_norm(i), grads.homodir_norm(i)),
                rho_components: [ratio(g[0].abs(), h[0]), ratio(g[1].abs(), h[1])],
                screen_radius: grads.screen_radius[i],
            }
        })
        .collect();
    let mut order: Vec<&GaussianCollision> = gaussians.iter().collect();
    order.sort_by(|a, b| b.footprint.cmp(&a.footprint).then(a.id.cmp(&b.id)));
    let top: Vec<usize> = order.iter().take(top_k).map(|g| g.id).collect();
    let maps = top
        .iter()
        .map(|&id| capture_pixel_gradients(&projected, &artifacts, &image_grad, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(CollisionAnalysis {
        report: CollisionReport {
            view: view.name.clone(),
            loss: value,
            footprint_bins: bins(&gaussians),
            gaussians,
            top_k: top,
        },
        maps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub tau_p: f64,
    pub tau_s: f64,
    pub strategy: Strategy,
    /// Clone plus split selections summed over every densification step.
    pub selected: usize,
    pub final_n: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub bytes: usize,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "tau_p,tau_s,strategy,selected,final_n,psnr,ssim,bytes";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{}",
            self.tau_p,
            self.tau_s,
            self.strategy,
            self.selected,
            self.final_n,
            crate::metrics::format_psnr(self.psnr),
            self.ssim,
            self.bytes
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SweepRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Result of training one sweep cell.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub row: SweepRow,
    pub log: Vec<MetricsRow>,
    pub cloud: GaussianCloud,
    /// Densification steps at which both strategies were evaluated.
    pub densify_steps: usize,
    /// Steps where the baseline split set was not contained in the abs
    /// split set at the cell's thresholds.
    pub subset_violations: usize,
}

/// Trains one cell. At every densification step the pre-densification
/// ledger is classified under both strategies at the cell's thresholds to
/// check that the baseline split set is contained in the abs split set.
/// With `out`, writes the cell's metrics CSV and the selection mask of its
/// first densification step on the first view.
pub fn run_cell(
    init: &GaussianCloud,
    views: &[TrainView],
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<CellOutcome> {
    #[derive(Default)]
    struct Tally {
        selected: usize,
        steps: usize,
        violations: usize,
        first: Option<(GaussianCloud, Vec<usize>)>,
    }
    let mut trainer = Trainer::new(init.clone(), views.to_vec(), config.clone())?;
    let tally = Rc::new(RefCell::new(Tally::default()));
    {
        let tally = tally.clone();
        let (densify, scale) = (config.densify.clone(), trainer.scale);
        trainer.set_densify_hook(Box::new(move |it, cloud, report| {
            let mut t = tally.borrow_mut();
            t.selected += report.counts.split + report.counts.clone;
            let pick = |strategy| {
                let c = DensifyConfig { strategy, ..densify.at_iteration(it) };
                select(cloud, &c, scale).split_ids
            };
            let (base, abs) = (pick(Strategy::Baseline), pick(Strategy::Abs));
            let abs: HashSet<usize> = abs.into_iter().collect();
            t.steps += 1;
            if !base.iter().all(|i| abs.contains(i)) {
                t.violations += 1;
            }
            if t.first.is_none() {
                let ids = report.split_ids.iter().chain(&report.clone_ids).copied().collect();
                t.first = Some((cloud.clone(), ids));
            }
        }));
    }
    trainer.run()?;
    let eval = evaluate(&trainer.cloud, views, config.background)?;
    let d = &config.densify;
    let t = tally.borrow();
    let row = SweepRow {
        tau_p: d.tau_p,
        tau_s: d.tau_s,
        strategy: d.strategy,
        selected: t.selected,
        final_n: trainer.cloud.len(),
        psnr: eval.psnr,
        ssim: eval.ssim,
        bytes: memory_bytes(&trainer.cloud),
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tag = format!("{}_p{}_s{}", d.strategy, d.tau_p, d.tau_s);
        let csv = dir.join(format!("metrics_{tag}.csv"));
        std::fs::write(&csv, metrics_csv(trainer.log())).map_err(|e| Error::io(&csv, e))?;
        if let Some((cloud, ids)) = &t.first {
            let mask: Image = selection_mask(cloud, &views[0].view, ids, config.background)?;
            mask.save_png(&dir.join(format!("mask_{tag}.png")))?;
        }
    }
    Ok(CellOutcome {
        row,
        log: trainer.log().to_vec(),
        densify_steps: t.steps,
        subset_violations: t.violations,
        cloud: trainer.cloud.clone(),
    })
}

/// Runs every `(strategy, tau_s, tau_p)` cell of the grid from the same
/// initial cloud, in that nesting order.
pub fn threshold_sweep(
    init: &GaussianCloud,
    views: &[TrainView],
    base: &TrainConfig,
    strategies: &[Strategy],
    tau_ps: &[f64],
    tau_ss: &[f64],
    out: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &strategy in strategies {
        for &tau_s in tau_ss {
            for &tau_p in tau_ps {
                let mut config = base.clone();
                config.densify.strategy = strategy;
                config.densify.tau_p = tau_p;
                config.densify.tau_s = tau_s;
                rows.push(run_cell(init, views, &config, out)?.row);
            }
        }
    }
    if let Some(dir) = out {
        let csv = dir.join("sweep.csv");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::write(&csv, sweep_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
    }
    Ok(rows)
}
