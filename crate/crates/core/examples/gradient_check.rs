//! Finite-difference check of every analytic gradient on random scenes.
//!
//! cargo run --release --example gradient_check -- [scenes]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splatkit::gradcheck::{check_scene, random_camera_scene, random_identity_scene, GradCheckConfig};

fn main() -> splatkit::Result<()> {
    let scenes: u64 = std::env::args().nth(1).map_or(10, |s| s.parse().expect("scene count"));
    let config = GradCheckConfig::default();
    let mut total_failures = 0;
    for s in 0..scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (kind, scene) = if s % 2 == 0 {
            ("identity", random_identity_scene(&mut rng, 8, 32, 24))
        } else {
            ("camera", random_camera_scene(&mut rng, 8, 32, 24, (s % 4) as usize))
        };
        let report = check_scene(&scene, &config)?;
        let failures = report.failures();
        let max_rel = report
            .checks
            .iter()
            .filter(|c| c.analytic.abs().max(c.numeric.abs()) > 1e-4)
            .map(|c| c.rel_error())
            .fold(0.0, f64::max);
        total_failures += failures.len();
        println!(
            "scene {s:>3} {kind:<8} checked {:>4} skipped {:>2} failed {:>2} max rel {:.2e} (|grad| > 1e-4)",
            report.checks.len(),
            report.skipped.len(),
            failures.len(),
            max_rel
        );
        for f in failures {
            println!("    {:?}: analytic {:.6e} numeric {:.6e}", f.param, f.analytic, f.numeric);
        }
    }
    println!("{total_failures} failures");
    Ok(())
}
