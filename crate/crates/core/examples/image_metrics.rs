//! PSNR and SSIM between two PNGs, or between a procedural image and
//! noisy copies of it when no paths are given.
//!
//! cargo run --release --example image_metrics -- [a.png b.png]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use splatkit::metrics::{format_psnr, psnr, ssim};
use splatkit::{synthetic, Image};

fn main() -> splatkit::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let [a, b] = args.as_slice() {
        let (a, b) = (Image::load(a.as_ref())?, Image::load(b.as_ref())?);
        println!("psnr={} ssim={:.6}", format_psnr(psnr(&a, &b)?), ssim(&a, &b)?);
        return Ok(());
    }
    let clean = synthetic::flower_image(128, 96, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for sigma in [0.0f64, 0.01, 0.05, 0.1, 0.2] {
        let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).unwrap();
        let noisy = Image::from_fn(clean.width, clean.height, |x, y| {
            clean.get(x, y).map(|c| (c + noise.sample(&mut rng)).clamp(0.0, 1.0))
        });
        println!(
            "sigma {sigma:<4}  psnr {:>6}  ssim {:.4}",
            format_psnr(psnr(&clean, &noisy)?),
            ssim(&clean, &noisy)?
        );
    }
    Ok(())
}
