//! Command-line front end. `run` parses arguments, executes one command and
//! returns the process exit code.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::camera::{load_cameras, save_cameras, CameraRecord};
use crate::densify::Strategy;
use crate::diagnostics::{collision_report, sweep_csv, threshold_sweep};
use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::image::Image;
use crate::metrics;
use crate::ply;
use crate::project::View;
use crate::raster::{render_view, AbsMode};
use crate::synthetic;
use crate::train::{evaluate, metrics_csv, ConfigOverrides, TrainConfig, TrainView, Trainer};

#[derive(Debug, Parser)]
#[command(name = "splatkit", version, about = "CPU Gaussian splatting with signed and homodirectional densification")]
pub struct Cli {
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Multi-view training from cameras + images, or a synthetic scene.
    Train(TrainArgs),
    /// Fit Gaussians to a single image in pixel coordinates.
    Fit2d(Fit2dArgs),
    /// Render a PLY through a camera file or an identity viewport.
    Render(RenderArgs),
    /// Collision report and sign maps for a cloud against one view.
    Diagnose(DiagnoseArgs),
    /// Threshold sweep on a single image.
    Sweep(SweepArgs),
    /// PSNR and SSIM between two images.
    Metrics(MetricsArgs),
}

/// Training options; each mirrors a config-file key and overrides it.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFlags {
    /// TOML or JSON config file with flat keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Total iterations [default 30000; fit2d 3000].
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Split criterion: baseline (signed) or abs (homodirectional) [default baseline].
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// Gradient threshold in NDC units [default 0.0002; abs typically 0.0004 or 0.0008].
    #[arg(long)]
    pub tau_p: Option<f64>,
    /// Scale threshold as a fraction of the scene extent [default 0.01; 0.001 with abs].
    #[arg(long)]
    pub tau_s: Option<f64>,
    /// Split children per parent [default 2].
    #[arg(long)]
    pub split_count: Option<usize>,
    /// Child scale divisor [default 1.6].
    #[arg(long)]
    pub split_scale_divisor: Option<f64>,
    /// Prune below this opacity [default 0.005].
    #[arg(long)]
    pub prune_opacity: Option<f64>,
    /// Enable densification [default true].
    #[arg(long)]
    pub densify: Option<bool>,
    #[arg(long)]
    pub densify_from: Option<usize>,
    #[arg(long)]
    pub densify_interval: Option<usize>,
    /// Last densification iteration [default 15000; clamped to --iterations when only that is given].
    #[arg(long)]
    pub densify_until: Option<usize>,
    /// 0 disables [default 3000 in 3D, 0 in 2D].
    #[arg(long)]
    pub opacity_reset_interval: Option<usize>,
    /// Prune oversized Gaussians [default true in 3D, false in 2D].
    #[arg(long)]
    pub guard_caps: Option<bool>,
    /// D-SSIM weight [default 0.2].
    #[arg(long)]
    pub loss_lambda_dssim: Option<f64>,
    #[arg(long)]
    pub lr_position: Option<f64>,
    #[arg(long)]
    pub lr_position_final: Option<f64>,
    #[arg(long)]
    pub lr_log_scale: Option<f64>,
    #[arg(long)]
    pub lr_rotation: Option<f64>,
    #[arg(long)]
    pub lr_opacity: Option<f64>,
    #[arg(long)]
    pub lr_color: Option<f64>,
    /// Seed for initialization, view order and split sampling [default 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Background color as r,g,b in [0, 1] [default 0,0,0].
    #[arg(long, value_parser = parse_rgb)]
    pub background: Option<[f64; 3]>,
    /// Homodirectional accumulation granularity [default pixel].
    #[arg(long)]
    pub abs_mode: Option<AbsMode>,
    /// Iterations per metrics row [default 100].
    #[arg(long)]
    pub log_interval: Option<usize>,
}

impl ConfigFlags {
    fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            iterations: self.iterations,
            tau_p: self.tau_p,
            tau_s: self.tau_s,
            strategy: self.strategy,
            split_count: self.split_count,
            split_scale_divisor: self.split_scale_divisor,
            prune_opacity: self.prune_opacity,
            densify: self.densify,
            densify_from: self.densify_from,
            densify_interval: self.densify_interval,
            densify_until: self.densify_until,
            opacity_reset_interval: self.opacity_reset_interval,
            guard_caps: self.guard_caps,
            loss_lambda_dssim: self.loss_lambda_dssim,
            lr_position: self.lr_position,
            lr_position_final: self.lr_position_final,
            lr_log_scale: self.lr_log_scale,
            lr_rotation: self.lr_rotation,
            lr_opacity: self.lr_opacity,
            lr_color: self.lr_color,
            regime: None,
            seed: self.seed,
            background: self.background,
            abs_mode: self.abs_mode,
            log_interval: self.log_interval,
        }
    }

    /// File keys first, then flags. When the iteration count is set but
    /// `densify_until` is not, the latter is clamped to the former.
    pub fn resolve(&self, mut base: TrainConfig) -> Result<TrainConfig> {
        let mut o = match &self.config {
            Some(path) => ConfigOverrides::load(path)?,
            None => ConfigOverrides::default(),
        };
        o.merge(&self.overrides());
        o.apply(&mut base);
        if o.iterations.is_some() && o.densify_until.is_none() {
            base.densify.densify_until = base.densify.densify_until.min(base.iterations);
        }
        base.validate()?;
        Ok(base)
    }
}

fn parse_rgb(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|_| "expected r,g,b".to_string())
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    Ok((w.parse().map_err(|e| format!("{e}"))?, h.parse().map_err(|e| format!("{e}"))?))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Camera JSON; each entry names its training image.
    #[arg(long, required_unless_present = "synthetic")]
    pub cameras: Option<PathBuf>,
    /// Initial cloud. Required with --cameras.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Train on the built-in textured scene seen by this many views instead.
    #[arg(long, conflicts_with = "cameras")]
    pub synthetic: Option<usize>,
    /// Image side for --synthetic.
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    /// Initial points for --synthetic.
    #[arg(long, default_value_t = 300)]
    pub init_points: usize,
    /// Every k-th view is held out of training and only rendered (0 = none).
    #[arg(long, default_value_t = 0)]
    pub holdout_every: usize,
    /// Write an iteration-tagged PLY every this many iterations (0 = final only).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_interval: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Debug, Args)]
pub struct ImageSource {
    /// Target image (PNG).
    #[arg(long, required_unless_present = "synthetic_image")]
    pub image: Option<PathBuf>,
    /// Built-in target instead of a file: noise or flower.
    #[arg(long, conflicts_with = "image")]
    pub synthetic_image: Option<String>,
    /// Size of the built-in target.
    #[arg(long, value_parser = parse_size, default_value = "100x65")]
    pub synthetic_size: (usize, usize),
}

impl ImageSource {
    pub fn load(&self, seed: u64) -> Result<(String, Image)> {
        if let Some(p) = &self.image {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            return Ok((name, Image::load(p)?));
        }
        let kind = self.synthetic_image.as_deref().unwrap_or("noise");
        let (w, h) = self.synthetic_size;
        let img = match kind {
            "noise" => synthetic::noise_texture(w, h, seed),
            "flower" => synthetic::flower_image(w, h, seed),
            _ => return Err(Error::InvalidConfig(format!("unknown synthetic image {kind:?}"))),
        };
        Ok((kind.to_string(), img))
    }
}

#[derive(Debug, Args)]
pub struct Fit2dArgs {
    #[command(flatten)]
    pub source: ImageSource,
    /// Number of initial Gaussians on a stratified grid.
    #[arg(long, default_value_t = 256)]
    pub n_init: usize,
    /// One centered Gaussian, no densification.
    #[arg(long)]
    pub single_gaussian: bool,
    /// Also write the collision report and sign maps.
    #[arg(long)]
    pub diagnose: bool,
    /// Sign maps for this many largest Gaussians.
    #[arg(long, default_value_t = 4)]
    pub top_k: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ply: PathBuf,
    /// Camera JSON; images are named after each entry's image file stem.
    #[arg(long, required_unless_present = "identity")]
    pub cameras: Option<PathBuf>,
    /// Render in pixel coordinates at WIDTHxHEIGHT instead.
    #[arg(long, value_parser = parse_size, conflicts_with = "cameras")]
    pub identity: Option<(usize, usize)>,
    #[arg(long, value_parser = parse_rgb, default_value = "0,0,0")]
    pub background: [f64; 3],
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub ply: PathBuf,
    /// Target image; the cloud is read in pixel coordinates.
    #[arg(long, required_unless_present = "cameras")]
    pub image: Option<PathBuf>,
    /// Camera JSON; the view is chosen with --view.
    #[arg(long, conflicts_with = "image")]
    pub cameras: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    #[arg(long, default_value_t = 4)]
    pub top_k: usize,
    /// D-SSIM weight of the loss whose gradient is analysed.
    #[arg(long, default_value_t = 0.0)]
    pub loss_lambda_dssim: f64,
    #[arg(long, value_parser = parse_rgb, default_value = "0,0,0")]
    pub background: [f64; 3],
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub source: ImageSource,
    /// Start every cell from this cloud instead of a grid.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub n_init: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![Strategy::Baseline, Strategy::Abs])]
    pub strategies: Vec<Strategy>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub tau_ps: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.001])]
    pub tau_ss: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fit2d_defaults() -> TrainConfig {
    let mut c = TrainConfig::image2d();
    c.iterations = 3000;
    c.densify.densify_until = 2000;
    c.densify.densify_from = 300;
    c
}

/// Trains, writing checkpoints and the metrics CSV. The returned cloud is
/// quantized to f32 so renders match what a reload of the PLY produces.
fn train_and_save(
    init: GaussianCloud,
    views: Vec<TrainView>,
    config: TrainConfig,
    out: &Path,
    checkpoint_interval: usize,
) -> Result<GaussianCloud> {
    mkdir(out)?;
    write(&out.join("config.json"), &serde_json::to_string_pretty(&config)?)?;
    let mut trainer = Trainer::new(init, views, config)?;
    trainer.dump_dir = Some(out.to_path_buf());
    let result = trainer.run_with(|t| {
        if checkpoint_interval > 0 && t.iteration() % checkpoint_interval == 0 {
            ply::save(&t.cloud, &out.join(format!("checkpoint_{:06}.ply", t.iteration())))?;
        }
        Ok(())
    });
    write(&out.join("metrics.csv"), &metrics_csv(trainer.log()))?;
    result?;
    let mut cloud = trainer.cloud;
    cloud.quantize_f32();
    ply::save(&cloud, &out.join("final.ply"))?;
    Ok(cloud)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let config = a.flags.resolve(TrainConfig::default())?;
    let (init, mut views) = if let Some(n) = a.synthetic {
        let scene = synthetic::textured_scene(n, a.size, a.init_points, 0.06, config.seed)?;
        mkdir(&a.out.join("images"))?;
        let mut views = Vec::new();
        let mut records = Vec::new();
        for (i, (cam, img)) in scene.cameras.iter().zip(&scene.images).enumerate() {
            let name = format!("view_{i:03}");
            let rel = format!("images/{name}.png");
            img.save_png(&a.out.join(&rel))?;
            records.push(CameraRecord::from_camera(i as u32, cam, rel));
            views.push(TrainView::camera(name, cam.clone(), img.clone())?);
        }
        save_cameras(&a.out.join("cameras.json"), &records)?;
        (scene.init, views)
    } else {
        let path = a.cameras.as_ref().expect("clap enforces --cameras");
        let init = a
            .init
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("--init PLY is required with --cameras".into()))?;
        let mut views = Vec::new();
        for (cam, img_path) in load_cameras(path)? {
            let name = img_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            views.push(TrainView::camera(name, cam, Image::load(&img_path)?)?);
        }
        (ply::load(init, None)?, views)
    };
    let mut held = Vec::new();
    if a.holdout_every > 0 {
        let all = std::mem::take(&mut views);
        for (i, v) in all.into_iter().enumerate() {
            if i % a.holdout_every == a.holdout_every - 1 {
                held.push(v);
            } else {
                views.push(v);
            }
        }
    }
    let background = config.background;
    let cloud = train_and_save(init, views.clone(), config, &a.out, a.checkpoint_interval)?;
    let shown = if held.is_empty() { &views } else { &held };
    mkdir(&a.out.join("renders"))?;
    for v in shown {
        render_view(&cloud, &v.view, background)?
            .1
            .save_png(&a.out.join("renders").join(format!("{}.png", v.name)))?;
    }
    let eval = evaluate(&cloud, shown, background)?;
    write(&a.out.join("eval.json"), &serde_json::to_string_pretty(&eval)?)?;
    println!(
        "gaussians={} psnr={} ssim={:.6}",
        cloud.len(),
        metrics::format_psnr(eval.psnr),
        eval.ssim
    );
    Ok(())
}

fn cmd_fit2d(a: &Fit2dArgs) -> Result<()> {
    let mut base = fit2d_defaults();
    if a.single_gaussian {
        base.densify.enabled = false;
    }
    let config = a.flags.resolve(base)?;
    let (name, target) = a.source.load(config.seed)?;
    let init = if a.single_gaussian {
        synthetic::single_gaussian_init(&target)
    } else {
        synthetic::grid_init(&target, a.n_init)
    };
    let background = config.background;
    let lambda = config.loss_lambda_dssim;
    let view = TrainView::image(name, target.clone());
    mkdir(&a.out)?;
    target.save_png(&a.out.join("target.png"))?;
    let cloud = train_and_save(init, vec![view.clone()], config, &a.out, 0)?;
    render_view(&cloud, &view.view, background)?
        .1
        .save_png(&a.out.join("render.png"))?;
    let eval = evaluate(&cloud, std::slice::from_ref(&view), background)?;
    write(&a.out.join("eval.json"), &serde_json::to_string_pretty(&eval)?)?;
    if a.diagnose {
        collision_report(&cloud, &view, background, lambda, a.top_k)?.write(&a.out.join("diagnose"))?;
    }
    println!(
        "gaussians={} l1={:.6} psnr={}",
        cloud.len(),
        eval.l1,
        metrics::format_psnr(eval.psnr)
    );
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let cloud = ply::load(&a.ply, None)?;
    mkdir(&a.out)?;
    if let Some((width, height)) = a.identity {
        let img = render_view(&cloud, &View::Identity { width, height }, a.background)?.1;
        return img.save_png(&a.out.join("render.png"));
    }
    let path = a.cameras.as_ref().expect("clap enforces --cameras");
    for (cam, img_path) in load_cameras(path)? {
        let name = img_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        render_view(&cloud, &View::Camera(cam), a.background)?
            .1
            .save_png(&a.out.join(format!("{name}.png")))?;
    }
    Ok(())
}

fn cmd_diagnose(a: &DiagnoseArgs) -> Result<()> {
    let cloud = ply::load(&a.ply, None)?;
    let view = if let Some(p) = &a.image {
        TrainView::image("image", Image::load(p)?)
    } else {
        let path = a.cameras.as_ref().expect("clap enforces --cameras");
        let cams = load_cameras(path)?;
        let (cam, img_path) = cams
            .into_iter()
            .nth(a.view)
            .ok_or_else(|| Error::InvalidConfig(format!("--view {} out of range", a.view)))?;
        TrainView::camera(format!("view_{}", a.view), cam, Image::load(&img_path)?)?
    };
    let analysis = collision_report(&cloud, &view, a.background, a.loss_lambda_dssim, a.top_k)?;
    analysis.write(&a.out)?;
    for id in &analysis.report.top_k {
        let g = analysis.report.get(*id).expect("top_k ids are reported");
        println!("id={} footprint={} rho={:.6}", g.id, g.footprint, g.rho);
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let config = a.flags.resolve(fit2d_defaults())?;
    let (name, target) = a.source.load(config.seed)?;
    let init = match &a.init {
        Some(p) => ply::load(p, None)?,
        None => synthetic::grid_init(&target, a.n_init),
    };
    let views = vec![TrainView::image(name, target)];
    let rows = threshold_sweep(&init, &views, &config, &a.strategies, &a.tau_ps, &a.tau_ss, Some(&a.out))?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}

fn cmd_metrics(a: &MetricsArgs) -> Result<()> {
    let (x, y) = (Image::load(&a.a)?, Image::load(&a.b)?);
    let psnr = metrics::psnr(&x, &y)?;
    let ssim = metrics::ssim(&x, &y)?;
    println!("psnr={} ssim={:?}", metrics::format_psnr(psnr), ssim);
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Fit2d(a) => cmd_fit2d(a),
        Command::Render(a) => cmd_render(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Metrics(a) => cmd_metrics(a),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code. Errors go to stderr as one line:
/// `error[<kind>]: <message>`.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return 1;
        }
    };
    let outcome = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(&cli)),
            Err(e) => Err(Error::InvalidConfig(format!("--threads: {e}"))),
        },
        None => execute(&cli),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Regime;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_file_and_clamp_densify_until() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, "tau_p = 0.0004\nstrategy = \"abs\"\n").unwrap();
        let flags = ConfigFlags {
            config: Some(cfg),
            tau_p: Some(0.0008),
            iterations: Some(500),
            ..Default::default()
        };
        let c = flags.resolve(TrainConfig::default()).unwrap();
        assert_eq!(c.densify.tau_p, 0.0008);
        assert_eq!(c.densify.strategy, Strategy::Abs);
        assert_eq!(c.densify.densify_until, 500);
        let bad = ConfigFlags {
            iterations: Some(500),
            densify_until: Some(900),
            ..Default::default()
        };
        assert!(bad.resolve(TrainConfig::default()).is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["splatkit", "bogus"]), 1);
        assert_eq!(run(["splatkit", "metrics", "--a", "x.png"]), 1);
        assert_eq!(run(["splatkit", "train", "--out", "/tmp/x", "--synthetic", "2", "--tau-p", "abc"]), 1);
    }

    #[test]
    fn io_errors_exit_two() {
        assert_eq!(run(["splatkit", "metrics", "--a", "/nonexistent/a.png", "--b", "/nonexistent/b.png"]), 2);
    }

    #[test]
    fn regime_parses() {
        assert_eq!("image2d".parse::<Regime>().unwrap(), Regime::Image2d);
        assert!("x".parse::<Regime>().is_err());
        assert_eq!("channel".parse::<AbsMode>().unwrap(), AbsMode::Channel);
    }
}
