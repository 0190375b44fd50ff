//! Multi-view training on a procedural scene, logging every densification
//! step through the trainer hook.
//!
//! cargo run --release --example train_3d -- [baseline|abs] [iterations]

use splatkit::densify::Strategy;
use splatkit::synthetic;
use splatkit::train::{evaluate, TrainConfig, TrainView, Trainer};

fn main() -> splatkit::Result<()> {
    let mut args = std::env::args().skip(1);
    let strategy: Strategy = args.next().map_or(Strategy::Abs, |s| s.parse().expect("strategy"));
    let iterations: usize = args.next().map_or(2000, |s| s.parse().expect("iterations"));

    let scene = synthetic::textured_scene(5, 64, 150, 0.08, 0)?;
    let views = scene
        .cameras
        .iter()
        .zip(&scene.images)
        .enumerate()
        .map(|(i, (c, img))| TrainView::camera(format!("view{i}"), c.clone(), img.clone()))
        .collect::<splatkit::Result<Vec<_>>>()?;

    let mut config = TrainConfig::default();
    config.iterations = iterations;
    config.densify.strategy = strategy;
    config.densify.tau_p = if strategy == Strategy::Abs { 8e-4 } else { 2e-4 };
    config.densify.densify_from = 200;
    config.densify.densify_until = iterations / 2;
    config.log_interval = 250;

    let mut trainer = Trainer::new(scene.init, views.clone(), config)?;
    println!("scene extent {:.3}", trainer.scale.extent);
    trainer.set_densify_hook(Box::new(|it, cloud, report| {
        println!(
            "it {it:>5}: N {:>5} split {:>4} clone {:>4} pruned {:>4}",
            cloud.len(),
            report.counts.split,
            report.counts.clone,
            report.counts.pruned
        );
    }));
    trainer.run()?;
    for row in trainer.log() {
        println!("it {:>5} loss {:.5} psnr {:.2}", row.iteration, row.loss, row.psnr);
    }
    let eval = evaluate(&trainer.cloud, &views, [0.0; 3])?;
    println!("final N {} psnr {:.2} ssim {:.4}", trainer.cloud.len(), eval.psnr, eval.ssim);
    Ok(())
}
