//! A/B of the two densification criteria on a 2D image and a small
//! multi-view scene: final Gaussian count and PSNR for each.
//!
//! cargo run --release --example densify_ab

use splatkit::densify::Strategy;
use splatkit::diagnostics::run_cell;
use splatkit::synthetic;
use splatkit::train::{TrainConfig, TrainView};

fn main() -> splatkit::Result<()> {
    let target = synthetic::noise_texture(96, 96, 0);
    let init = synthetic::grid_init(&target, 36);
    let views = vec![TrainView::image("noise", target)];
    let mut base = TrainConfig::image2d();
    base.iterations = 1200;
    base.loss_lambda_dssim = 0.0;
    base.densify.densify_from = 200;
    base.densify.densify_until = 800;
    base.densify.tau_s = 0.001;
    println!("image2d, 96x96 noise");
    compare(&init, &views, &base)?;

    let scene = synthetic::textured_scene(4, 64, 100, 0.08, 0)?;
    let views: Vec<TrainView> = scene
        .cameras
        .iter()
        .zip(&scene.images)
        .enumerate()
        .map(|(i, (c, img))| TrainView::camera(format!("view{i}"), c.clone(), img.clone()))
        .collect::<splatkit::Result<_>>()?;
    let mut base = TrainConfig::default();
    base.iterations = 1500;
    base.loss_lambda_dssim = 0.0;
    base.densify.densify_from = 200;
    base.densify.densify_until = 1000;
    base.densify.tau_s = 0.001;
    println!("view3d, 4 views of 64x64");
    compare(&scene.init, &views, &base)
}

fn compare(init: &splatkit::GaussianCloud, views: &[TrainView], base: &TrainConfig) -> splatkit::Result<()> {
    for (strategy, tau_p) in [(Strategy::Baseline, 2e-4), (Strategy::Abs, 8e-4)] {
        let mut config = base.clone();
        config.densify.strategy = strategy;
        config.densify.tau_p = tau_p;
        let cell = run_cell(init, views, &config, None)?;
        println!(
            "  {:<8} tau_p {:.0e}: N {:>5}  psnr {:.2}  ssim {:.4}  subset violations {}",
            strategy.as_str(),
            tau_p,
            cell.row.final_n,
            cell.row.psnr,
            cell.row.ssim,
            cell.subset_violations
        );
    }
    Ok(())
}
