//! Sweeps the split threshold for both criteria and writes sweep.csv with
//! per-cell metrics logs and first-step selection masks.
//!
//! cargo run --release --example threshold_sweep -- [out_dir]

use std::path::PathBuf;

use splatkit::densify::Strategy;
use splatkit::diagnostics::{sweep_csv, threshold_sweep};
use splatkit::synthetic;
use splatkit::train::{TrainConfig, TrainView};

fn main() -> splatkit::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "threshold_sweep_out".into()));
    let target = synthetic::flower_image(80, 52, 0);
    let init = synthetic::grid_init(&target, 25);
    let views = vec![TrainView::image("flower", target)];
    let mut base = TrainConfig::image2d();
    base.iterations = 800;
    base.loss_lambda_dssim = 0.0;
    base.densify.densify_from = 100;
    base.densify.densify_until = 500;
    let rows = threshold_sweep(
        &init,
        &views,
        &base,
        &[Strategy::Baseline, Strategy::Abs],
        &[1e-4, 2e-4, 4e-4, 8e-4],
        &[0.001],
        Some(&out),
    )?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}
