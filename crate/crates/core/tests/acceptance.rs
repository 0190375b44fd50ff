//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line straight to
//! stdout (visible without `--nocapture`).
//!
//! Criteria 5 and 6 are measurements: their outcome is reported, and the
//! test asserts only that the numbers reproduce the frozen values in
//! `tests/golden/` (PSNR within 0.1 dB, N within 10%). Set
//! `SPLATKIT_STRICT=1` to also fail on a FAIL line, and `SPLATKIT_BLESS=1`
//! to rewrite the golden files.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use splatkit::densify::Strategy;
use splatkit::diagnostics::{collision_report, run_cell, sweep_csv, CellOutcome, SweepRow};
use splatkit::gradcheck::{all_params, check_params, random_camera_scene, random_identity_scene, GradCheckConfig, Param};
use splatkit::raster::{backward, pixel_contributions, render, render_naive, render_view};
use splatkit::train::{evaluate, TrainConfig, TrainView};
use splatkit::{loss, ply, synthetic, GaussianCloud};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "[acceptance] criterion {id} {name}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn strict() -> bool {
    std::env::var_os("SPLATKIT_STRICT").is_some()
}

fn bless() -> bool {
    std::env::var_os("SPLATKIT_BLESS").is_some()
}

#[test]
fn c1_gradient_correctness() {
    let start = Instant::now();
    let config = GradCheckConfig::default();
    let (mut checked, mut skipped, mut failed, mut max_rel) = (0, 0, 0, 0.0f64);
    let mut first_failure = None;
    for s in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + s);
        let scene = if s % 2 == 0 {
            random_identity_scene(&mut rng, 4 + (s as usize % 16), 24 + (s as usize % 24), 20 + (s as usize % 28))
        } else {
            random_camera_scene(&mut rng, 4 + (s as usize % 16), 24 + (s as usize % 24), 20 + (s as usize % 28), 0)
        };
        let params: Vec<Param> = all_params(&scene);
        let r = check_params(&scene, &params, &config).unwrap();
        checked += r.checks.len();
        skipped += r.skipped.len();
        let fails = r.failures();
        failed += fails.len();
        if first_failure.is_none() {
            first_failure = fails.first().map(|f| format!("{f:?}"));
        }
        // relative error over gradients of meaningful size
        for c in r.checks.iter().filter(|c| c.analytic.abs().max(c.numeric.abs()) > 1e-4) {
            max_rel = max_rel.max(c.rel_error());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failed == 0 && checked > 0 && secs < 120.0;
    report(
        1,
        "gradient-correctness",
        pass,
        &format!(
            "50 scenes, {checked} gradients checked, {failed} failed, {skipped} skipped at kinks, max rel err (|grad| > 1e-4) {max_rel:.2e}, {secs:.1}s{}",
            first_failure.map(|f| format!(", first failure {f}")).unwrap_or_default()
        ),
    );
    assert!(pass);
}

#[test]
fn c2_dominance_invariant() {
    let (mut gaussians, mut single, mut violations) = (0usize, 0usize, 0usize);
    for s in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + s);
        let n = 1 + (s as usize % 30);
        let scene = if s % 2 == 0 {
            let mut scene = random_identity_scene(&mut rng, n, 40, 32);
            // Every other Gaussian a faint sub-pixel dot: footprint of one pixel.
            for i in (0..scene.cloud.len()).step_by(2) {
                scene.cloud.log_scales[i] = nalgebra::Vector3::repeat(0.05f64.ln());
                scene.cloud.opacity_logits[i] = (0.005f64 / 0.995).ln();
            }
            scene
        } else {
            random_camera_scene(&mut rng, n, 40, 32, if s % 4 == 1 { 0 } else { 2 })
        };
        let projected = scene.view.project(&scene.cloud);
        let (img, art) = render(&projected, 40, 32, scene.background).unwrap();
        let (_, g) = loss::photometric(&img, &scene.target, if s % 3 == 0 { 0.2 } else { 0.0 }).unwrap();
        let grads = backward(&scene.cloud, &scene.view, &projected, &art, &g).unwrap();
        for i in 0..grads.len() {
            if !grads.touched[i] {
                continue;
            }
            gaussians += 1;
            let (sg, h) = (grads.signed_view2d[i], grads.homodir_view2d[i]);
            for c in 0..2 {
                if h[c] < sg[c].abs() - 1e-9 * h[c].max(1e-12) {
                    violations += 1;
                }
            }
            if grads.footprint_pixels[i] == 1 {
                single += 1;
                if h != [sg[0].abs(), sg[1].abs()] {
                    violations += 1;
                }
            }
        }
    }
    let pass = violations == 0;
    report(
        2,
        "dominance-invariant",
        pass,
        &format!("200 scenes, {gaussians} touched Gaussians, {single} single-pixel footprints, {violations} violations"),
    );
    assert!(pass);
}

#[test]
fn c3_oracle_equivalence() {
    let (mut max_diff, mut max_weight_err) = (0.0f64, 0.0f64);
    for s in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + s);
        let (w, h) = (16 + (s as usize * 37) % 113, 16 + (s as usize * 53) % 113);
        let n = 1 + (s as usize * 97) % 500;
        let scene = if s % 2 == 0 {
            random_identity_scene(&mut rng, n, w, h)
        } else {
            random_camera_scene(&mut rng, n, w, h, 0)
        };
        let projected = scene.view.project(&scene.cloud);
        let (tiled, art) = render(&projected, w, h, scene.background).unwrap();
        let naive = render_naive(&projected, w, h, scene.background).unwrap();
        max_diff = max_diff.max(tiled.max_abs_diff(&naive));
        for y in (0..h).step_by(3) {
            for x in (0..w).step_by(3) {
                let sum: f64 = pixel_contributions(&projected, &art, x, y)
                    .iter()
                    .map(|c| c.alpha * c.transmittance)
                    .sum();
                let err = (sum + art.final_transmittance[y * w + x] - 1.0).abs();
                max_weight_err = max_weight_err.max(err);
            }
        }
    }
    let pass = max_diff <= 1e-6 && max_weight_err <= 1e-5;
    report(
        3,
        "oracle-equivalence",
        pass,
        &format!("100 scenes up to 128x128 / 500 Gaussians, max |tiled - naive| {max_diff:.2e}, max |sum w + T - 1| {max_weight_err:.2e}"),
    );
    assert!(pass);
}

#[test]
fn c4_gradient_collision() {
    let start = Instant::now();
    let target = synthetic::flower_image(100, 65, 0);
    let init = synthetic::single_gaussian_init(&target);
    let mut config = TrainConfig::image2d();
    config.iterations = 1500;
    config.loss_lambda_dssim = 0.0;
    config.densify.enabled = false;
    config.densify.densify_until = 0;
    let view = TrainView::image("flower", target.clone());
    let (cloud, _) = splatkit::train::train(init, vec![view.clone()], config).unwrap();
    let analysis = collision_report(&cloud, &view, [0.0; 3], 0.0, 1).unwrap();
    let g = analysis.report.get(0).unwrap();
    let map = &analysis.maps[0];
    let both_signs = (0..2).all(|a| map.positive_count(a) > 0 && map.negative_count(a) > 0);
    let l1 = evaluate(&cloud, std::slice::from_ref(&view), [0.0; 3]).unwrap().l1;
    let secs = start.elapsed().as_secs_f64();
    // A blurred blob: the fit stays far from the target.
    let pass = g.rho < 0.5 && both_signs && l1 > 0.05 && secs < 60.0;
    report(
        4,
        "gradient-collision",
        pass,
        &format!(
            "100x65 single-Gaussian fit, L1 {l1:.4}, rho {:.4} (|g| {:.3e}, |g_hat| {:.3e}, {} px), sign map x +{}/-{} y +{}/-{}, {secs:.1}s",
            g.rho,
            g.signed_norm,
            g.homodir_norm,
            g.footprint,
            map.positive_count(0),
            map.negative_count(0),
            map.positive_count(1),
            map.negative_count(1)
        ),
    );
    assert!(pass);
}

// Desk-scale experiments shared by criteria 5 and 6.

fn ab2d_scene() -> (GaussianCloud, Vec<TrainView>) {
    let target = synthetic::noise_texture(256, 256, 0);
    (synthetic::grid_init(&target, 64), vec![TrainView::image("noise256", target)])
}

fn ab2d_config(strategy: Strategy, tau_p: f64) -> TrainConfig {
    let mut c = TrainConfig::image2d();
    c.iterations = 2000;
    c.loss_lambda_dssim = 0.0;
    c.densify.strategy = strategy;
    c.densify.tau_p = tau_p;
    c.densify.tau_s = 0.001;
    c.densify.densify_from = 300;
    c.densify.densify_interval = 100;
    c.densify.densify_until = 1000;
    c
}

fn ab3d_scene() -> (GaussianCloud, Vec<TrainView>) {
    let scene = synthetic::textured_scene(5, 96, 100, 0.08, 0).unwrap();
    let views = scene
        .cameras
        .iter()
        .zip(&scene.images)
        .enumerate()
        .map(|(i, (c, img))| TrainView::camera(format!("view{i}"), c.clone(), img.clone()).unwrap())
        .collect();
    (scene.init, views)
}

fn ab3d_config(strategy: Strategy, tau_p: f64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.iterations = 4000;
    c.loss_lambda_dssim = 0.0;
    c.densify.strategy = strategy;
    c.densify.tau_p = tau_p;
    c.densify.tau_s = 0.001;
    c.densify.densify_from = 300;
    c.densify.densify_interval = 100;
    c.densify.densify_until = 2000;
    c
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum Regime {
    Image2d,
    View3d,
}

/// Runs (or fetches) one experiment cell; results are cached across tests.
fn cell(regime: Regime, strategy: Strategy, tau_p: f64) -> CellOutcome {
    static CACHE: OnceLock<Mutex<HashMap<String, CellOutcome>>> = OnceLock::new();
    let key = format!("{regime:?}/{strategy}/{tau_p}");
    let cache = CACHE.get_or_init(Default::default);
    if let Some(c) = cache.lock().unwrap().get(&key) {
        return c.clone();
    }
    let (init, views, config) = match regime {
        Regime::Image2d => {
            let (i, v) = ab2d_scene();
            (i, v, ab2d_config(strategy, tau_p))
        }
        Regime::View3d => {
            let (i, v) = ab3d_scene();
            (i, v, ab3d_config(strategy, tau_p))
        }
    };
    let out = run_cell(&init, &views, &config, None).unwrap();
    cache.lock().unwrap().insert(key, out.clone());
    out
}

fn golden_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn parse_golden(text: &str) -> Vec<(String, f64, usize, f64)> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let psnr = if f[5] == "inf" { f64::INFINITY } else { f[5].parse().unwrap() };
            (format!("{}/{}", f[2], f[0]), psnr, f[4].parse().unwrap(), f[0].parse().unwrap())
        })
        .collect()
}

/// Compares rows against the golden CSV (recording it if absent or when
/// blessing). Returns a description of any drift.
fn check_golden(name: &str, rows: &[SweepRow]) -> Vec<String> {
    let path = golden_path(name);
    let csv = sweep_csv(rows);
    if bless() || !path.exists() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &csv).unwrap();
        return Vec::new();
    }
    let golden = parse_golden(&std::fs::read_to_string(&path).unwrap());
    let mut drift = Vec::new();
    for r in rows {
        let key = format!("{}/{}", r.strategy, r.tau_p);
        let Some(g) = golden.iter().find(|g| g.0 == key) else {
            drift.push(format!("{key}: missing from {name}"));
            continue;
        };
        if (r.psnr - g.1).abs() > 0.1 {
            drift.push(format!("{key}: psnr {:.3} vs golden {:.3}", r.psnr, g.1));
        }
        if (r.final_n as f64 - g.2 as f64).abs() > 0.1 * g.2 as f64 {
            drift.push(format!("{key}: N {} vs golden {}", r.final_n, g.2));
        }
    }
    drift
}

fn ab_verdict(label: &str, base: &CellOutcome, abs: &CellOutcome) -> (bool, bool, String) {
    let a = base.row.psnr < abs.row.psnr && abs.row.final_n <= base.row.final_n;
    let b = base.subset_violations == 0 && abs.subset_violations == 0;
    let detail = format!(
        "{label}: baseline@0.0002 psnr {:.3} N {} | abs@0.0008 psnr {:.3} N {} | margin {:+.3} dB, N ratio {:.3} | subset violations {}/{} steps",
        base.row.psnr,
        base.row.final_n,
        abs.row.psnr,
        abs.row.final_n,
        abs.row.psnr - base.row.psnr,
        abs.row.final_n as f64 / base.row.final_n as f64,
        base.subset_violations + abs.subset_violations,
        base.densify_steps + abs.densify_steps
    );
    (a, b, detail)
}

#[test]
fn c5_desk_scale_ab() {
    let start = Instant::now();
    let b2 = cell(Regime::Image2d, Strategy::Baseline, 0.0002);
    let a2 = cell(Regime::Image2d, Strategy::Abs, 0.0008);
    let b3 = cell(Regime::View3d, Strategy::Baseline, 0.0002);
    let a3 = cell(Regime::View3d, Strategy::Abs, 0.0008);
    let secs = start.elapsed().as_secs_f64();
    let (a_2d, b_2d, d2) = ab_verdict("image2d 256x256 noise", &b2, &a2);
    let (a_3d, b_3d, d3) = ab_verdict("view3d 5x96x96 textured scene", &b3, &a3);
    let mut drift = check_golden("ab_image2d.csv", &[b2.row.clone(), a2.row.clone()]);
    drift.extend(check_golden("ab_view3d.csv", &[b3.row.clone(), a3.row.clone()]));
    let pass = a_2d && b_2d && a_3d && b_3d && secs < 900.0;
    report(
        5,
        "desk-scale-ab",
        pass,
        &format!(
            "(a) image2d {} view3d {}; (b) image2d {} view3d {}; {d2}; {d3}; {secs:.0}s",
            if a_2d { "holds" } else { "fails" },
            if a_3d { "holds" } else { "fails" },
            if b_2d { "holds" } else { "fails" },
            if b_3d { "holds" } else { "fails" },
        ),
    );
    assert!(drift.is_empty(), "golden drift: {drift:?}");
    // The subset property is structural and must hold regardless.
    assert!(b_2d && b_3d);
    if strict() {
        assert!(pass);
    }
}

#[test]
fn c6_threshold_sweep_trend() {
    let taus = [2.0e-4, 1.6e-4, 1.2e-4, 1.0e-4];
    let baseline: Vec<SweepRow> = taus
        .iter()
        .map(|&t| cell(Regime::Image2d, Strategy::Baseline, t).row)
        .collect();
    let abs = cell(Regime::Image2d, Strategy::Abs, 0.0008).row;
    let monotone = baseline.windows(2).all(|w| w[1].final_n >= w[0].final_n);
    let best = baseline
        .iter()
        .max_by(|a, b| a.psnr.total_cmp(&b.psnr))
        .unwrap();
    let beats = abs.psnr >= best.psnr && 2 * abs.final_n <= best.final_n;
    let mut rows = baseline.clone();
    rows.push(abs.clone());
    let drift = check_golden("sweep_image2d.csv", &rows);
    let cells: Vec<String> = baseline
        .iter()
        .map(|r| format!("{:.1e}: N {} psnr {:.3}", r.tau_p, r.final_n, r.psnr))
        .collect();
    let pass = monotone && beats;
    report(
        6,
        "threshold-sweep-trend",
        pass,
        &format!(
            "baseline [{}] N monotone {}; abs@0.0008 N {} psnr {:.3} vs best baseline ({:.1e}) N {} psnr {:.3}: {}",
            cells.join("; "),
            if monotone { "yes" } else { "no" },
            abs.final_n,
            abs.psnr,
            best.tau_p,
            best.final_n,
            best.psnr,
            if beats { "holds" } else { "fails" }
        ),
    );
    assert!(drift.is_empty(), "golden drift: {drift:?}");
    if strict() {
        assert!(pass);
    }
}

fn run_cli(args: &[&str]) -> i32 {
    splatkit::cli::run(std::iter::once("splatkit").chain(args.iter().copied()))
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn c7_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut mismatches = Vec::new();
    let mut compared = 0;
    let runs: Vec<(&str, Vec<&str>, Vec<&str>)> = vec![
        (
            "fit2d",
            vec!["fit2d", "--synthetic-image", "noise", "--synthetic-size", "48x40", "--n-init", "16", "--iterations", "300", "--densify-from", "100", "--densify-until", "250", "--tau-p", "0.0002", "--tau-s", "0.001", "--seed", "7"],
            vec!["metrics.csv", "final.ply", "render.png"],
        ),
        (
            "train",
            vec!["train", "--synthetic", "3", "--size", "32", "--init-points", "40", "--iterations", "150", "--densify-from", "50", "--densify-interval", "50", "--strategy", "abs", "--tau-p", "0.0008", "--tau-s", "0.001", "--seed", "3"],
            vec!["metrics.csv", "final.ply", "renders/view_000.png"],
        ),
        (
            "sweep",
            vec!["sweep", "--synthetic-image", "flower", "--synthetic-size", "40x26", "--n-init", "9", "--iterations", "200", "--densify-from", "100", "--densify-until", "200", "--tau-ps", "0.0002,0.0008", "--seed", "1"],
            vec!["sweep.csv"],
        ),
    ];
    for (name, args, files) in &runs {
        let mut outputs = Vec::new();
        for (k, threads) in ["1", "3", "1"].iter().enumerate() {
            let out = dir.path().join(format!("{name}_{k}"));
            let mut full = vec!["--threads", threads];
            full.extend(args.iter().copied());
            full.extend(["--out", out.to_str().unwrap()]);
            assert_eq!(run_cli(&full), 0, "{name} failed");
            outputs.push(out);
        }
        for f in files {
            let first = read(&outputs[0].join(f));
            for o in &outputs[1..] {
                compared += 1;
                if read(&o.join(f)) != first {
                    mismatches.push(format!("{name}/{f}"));
                }
            }
        }
    }
    let pass = mismatches.is_empty();
    report(
        7,
        "determinism",
        pass,
        &format!("fit2d, train, sweep repeated with 1 and 3 threads: {compared} file comparisons, mismatches {mismatches:?}"),
    );
    assert!(pass);
}

#[test]
fn c8_interop() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut stable = true;
    let mut attr_counts = Vec::new();
    for degree in 0..=3 {
        let mut cloud = random_camera_scene(&mut rng, 25, 16, 16, degree).cloud;
        cloud.quantize_f32();
        let bytes = ply::to_bytes(&cloud);
        let back = ply::from_bytes(&bytes, Some(degree)).unwrap();
        stable &= back == cloud && ply::to_bytes(&back) == bytes;
        attr_counts.push(ply::attribute_names(degree).len());
        // header property count must agree with the name list
        let header = String::from_utf8_lossy(&bytes[..bytes.windows(10).position(|w| w == b"end_header").unwrap()]).into_owned();
        let props = header.lines().filter(|l| l.starts_with("property")).count();
        stable &= props == attr_counts[degree];
    }
    let names = ply::attribute_names(3);
    let layout = names[..6] == ["x", "y", "z", "nx", "ny", "nz"]
        && names[6..9] == ["f_dc_0", "f_dc_1", "f_dc_2"]
        && names[9] == "f_rest_0"
        && names[53] == "f_rest_44"
        && names[54] == "opacity"
        && names[55..58] == ["scale_0", "scale_1", "scale_2"]
        && names[58..62] == ["rot_0", "rot_1", "rot_2", "rot_3"];
    let pass = stable && attr_counts[3] == 62 && layout;
    report(
        8,
        "interop",
        pass,
        &format!("bitwise round trip degrees 0-3: {stable}; attributes per degree {attr_counts:?}; 3D-GS layout: {layout}"),
    );
    assert!(pass);
}

#[test]
fn render_view_matches_training_render() {
    // Guards the helper used by the CLI for held-out renders.
    let (init, views) = ab3d_scene();
    let (p, img, _) = render_view(&init, &views[0].view, [0.0; 3]).unwrap();
    assert!(!p.is_empty());
    assert_eq!(img.width, 96);
}
