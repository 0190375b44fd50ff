//! Renders a procedural scene from several cameras and checks the tiled
//! rasterizer against the per-pixel reference.
//!
//! cargo run --release --example render_scene -- [out_dir]

use std::path::PathBuf;

use splatkit::raster::{render, render_naive};
use splatkit::{synthetic, View};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "render_scene_out".into()));
    std::fs::create_dir_all(&out)?;

    let scene = synthetic::textured_scene(4, 128, 400, 0.06, 0)?;
    println!("{} Gaussians, {} cameras", scene.init.len(), scene.cameras.len());
    for (i, cam) in scene.cameras.iter().enumerate() {
        let view = View::Camera(cam.clone());
        let projected = view.project(&scene.init);
        let (img, art) = render(&projected, cam.width, cam.height, [0.0; 3])?;
        let naive = render_naive(&projected, cam.width, cam.height, [0.0; 3])?;
        let coverage = 1.0 - art.final_transmittance.iter().sum::<f64>() / art.final_transmittance.len() as f64;
        println!(
            "view {i}: {} visible, coverage {:.3}, |tiled - naive| = {:.1e}",
            projected.len(),
            coverage,
            img.max_abs_diff(&naive)
        );
        img.save_png(&out.join(format!("init_{i}.png")))?;
        scene.images[i].save_png(&out.join(format!("target_{i}.png")))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
