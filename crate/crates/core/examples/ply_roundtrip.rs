//! Writes a cloud in the standard 3D Gaussian splatting PLY layout, reads
//! it back and confirms the bytes are stable.
//!
//! cargo run --release --example ply_roundtrip -- [path.ply]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splatkit::gradcheck::random_camera_scene;
use splatkit::ply;

fn main() -> splatkit::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "roundtrip.ply".into());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cloud = random_camera_scene(&mut rng, 100, 32, 32, 3).cloud;
    // PLY stores f32; quantize first so the round trip is exact.
    cloud.quantize_f32();
    ply::save(&cloud, path.as_ref())?;
    let back = ply::load(path.as_ref(), Some(3))?;
    println!("{} Gaussians, SH degree {}", back.len(), back.sh_degree);
    println!("properties: {}", ply::attribute_names(3).join(" "));
    println!("identical after round trip: {}", back == cloud);
    println!("byte-stable: {}", ply::to_bytes(&back) == ply::to_bytes(&cloud));
    Ok(())
}
