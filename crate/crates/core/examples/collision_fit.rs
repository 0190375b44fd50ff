//! Fits one Gaussian to an image and shows how its per-pixel positional
//! gradients cancel: the summed gradient is tiny while the sum of absolute
//! values stays large.
//!
//! cargo run --release --example collision_fit -- [out_dir]

use std::path::PathBuf;

use splatkit::diagnostics::collision_report;
use splatkit::synthetic;
use splatkit::train::{train, TrainConfig, TrainView};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "collision_fit_out".into()));
    let target = synthetic::flower_image(100, 65, 0);
    let view = TrainView::image("flower", target.clone());

    let mut config = TrainConfig::image2d();
    config.iterations = 1500;
    config.loss_lambda_dssim = 0.0;
    config.densify.enabled = false;
    config.densify.densify_until = 0;
    let (cloud, log) = train(synthetic::single_gaussian_init(&target), vec![view.clone()], config)?;
    if let Some(last) = log.last() {
        println!("after {} iterations: loss {:.4}", last.iteration, last.loss);
    }

    let analysis = collision_report(&cloud, &view, [0.0; 3], 0.0, 1)?;
    let g = analysis.report.get(0).expect("one Gaussian");
    println!("footprint   {} pixels", g.footprint);
    println!("|sum g|     {:.4e}", g.signed_norm);
    println!("sum |g|     {:.4e}", g.homodir_norm);
    println!("rho         {:.4} (x {:.4}, y {:.4})", g.rho, g.rho_components[0], g.rho_components[1]);
    analysis.write(&out)?;
    println!("sign maps and raw gradients in {}", out.display());
    Ok(())
}
