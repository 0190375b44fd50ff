use std::path::Path;
use std::process::Command;

use splatkit::image::Image;
use splatkit::ply;

fn splatkit(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_splatkit"))
        .args(args)
        .output()
        .expect("spawn splatkit")
}

fn run(args: &[&str]) -> i32 {
    splatkit::cli::run(std::iter::once("splatkit").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn fit2d_zero_iterations_keeps_the_init() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit");
    let code = run(&[
        "fit2d", "--synthetic-image", "flower", "--n-init", "1", "--iterations", "0", "--out", p(&out),
    ]);
    assert_eq!(code, 0);
    let cloud = ply::load(&out.join("final.ply"), Some(0)).unwrap();
    assert_eq!(cloud.len(), 1);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1, "header only: {csv}");
    assert!(out.join("render.png").exists() && out.join("target.png").exists());
}

#[test]
fn metrics_on_identical_images() {
    let dir = tempfile::tempdir().unwrap();
    let img = Image::from_fn(32, 24, |x, y| [x as f64 / 31.0, y as f64 / 23.0, 0.5]);
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    img.save_png(&a).unwrap();
    img.save_png(&b).unwrap();
    let o = splatkit(&["metrics", "--a", p(&a), "--b", p(&b)]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "psnr=inf ssim=1.0");
}

#[test]
fn render_reproduces_save_time_renders() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train");
    let code = run(&[
        "train", "--synthetic", "2", "--size", "32", "--init-points", "30", "--iterations", "60",
        "--densify-from", "20", "--densify-interval", "20", "--out", p(&out),
    ]);
    assert_eq!(code, 0);
    let again = dir.path().join("render");
    let code = run(&[
        "render", "--ply", p(&out.join("final.ply")), "--cameras", p(&out.join("cameras.json")), "--out", p(&again),
    ]);
    assert_eq!(code, 0);
    for name in ["view_000.png", "view_001.png"] {
        let saved = std::fs::read(out.join("renders").join(name)).unwrap();
        let rendered = std::fs::read(again.join(name)).unwrap();
        assert!(saved == rendered, "{name} differs");
    }
}

#[test]
fn train_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let code = run(&[
            "train", "--synthetic", "2", "--size", "24", "--init-points", "20", "--iterations", "50",
            "--densify-from", "10", "--densify-interval", "10", "--log-interval", "5", "--seed", "11",
            "--out", p(&out),
        ]);
        assert_eq!(code, 0);
        csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(String::from_utf8_lossy(&csvs[0]).lines().count(), 11);
}

#[test]
fn diagnose_sign_maps_show_both_signs() {
    let dir = tempfile::tempdir().unwrap();
    let fit = dir.path().join("fit");
    let code = run(&[
        "fit2d", "--synthetic-image", "flower", "--single-gaussian", "--iterations", "400", "--out", p(&fit),
    ]);
    assert_eq!(code, 0);
    let diag = dir.path().join("diag");
    let o = splatkit(&[
        "diagnose", "--ply", p(&fit.join("final.ply")), "--image", p(&fit.join("target.png")), "--out", p(&diag),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("id=0 "));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(diag.join("collision.json")).unwrap()).unwrap();
    let rho = report["gaussians"][0]["rho"].as_f64().unwrap();
    assert!(rho < 0.5, "rho {rho}");
    for axis in ["x", "y"] {
        let img = Image::load(&diag.join(format!("sign_0_{axis}.png"))).unwrap();
        let red = img.pixels.iter().filter(|v| v[0] > 0.0).count();
        let green = img.pixels.iter().filter(|v| v[1] > 0.0).count();
        assert!(red > 0 && green > 0, "{axis}: {red} red, {green} green");
        assert!(diag.join(format!("grad_0_{axis}.pfm")).exists());
    }
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "iterations = 40\ndensify_until = 30\ntau_p = 0.5\nseed = 4\n").unwrap();
    let out = dir.path().join("fit");
    let code = run(&[
        "fit2d", "--synthetic-image", "noise", "--synthetic-size", "24x16", "--n-init", "4", "--config", p(&cfg),
        "--tau-p", "0.25", "--out", p(&out),
    ]);
    assert_eq!(code, 0);
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(written["iterations"], 40);
    assert_eq!(written["seed"], 4);
    assert_eq!(written["densify"]["tau_p"], 0.25);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    let o = splatkit(&["fit2d", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[usage]"));

    let o = splatkit(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let help = String::from_utf8_lossy(&o.stdout).into_owned();
    for sub in ["train", "fit2d", "render", "diagnose", "sweep", "metrics"] {
        assert!(help.contains(sub), "help lacks {sub}");
    }

    let missing = dir.path().join("missing.png");
    let o = splatkit(&["metrics", "--a", p(&missing), "--b", p(&missing)]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "iterations = 10\ntau = 3\n").unwrap();
    let o = splatkit(&["fit2d", "--synthetic-image", "noise", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr).into_owned();
    assert!(err.contains("line 2") && err.contains("tau"), "{err}");

    let o = splatkit(&[
        "fit2d", "--synthetic-image", "noise", "--loss-lambda-dssim", "2", "--out", p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));

    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    Image::filled(8, 8, [0.5; 3]).save_png(&a).unwrap();
    Image::filled(9, 8, [0.5; 3]).save_png(&b).unwrap();
    let o = splatkit(&["metrics", "--a", p(&a), "--b", p(&b)]);
    assert_ne!(o.status.code(), Some(0));
}
