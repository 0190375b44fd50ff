//! Optimization loop: render, loss, backward, Adam, ledger accumulation,
//! densification and opacity resets.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{scene_extent, Camera};
use crate::densify::{self, DensifyConfig, SceneScale, SelectionReport, Strategy};
use crate::error::{Error, Result};
use crate::gaussian::{logit, GaussianCloud};
use crate::image::Image;
use crate::loss;
use crate::metrics;
use crate::optim::{Adam, LearningRates};
use crate::ply;
use crate::project::View;
use crate::raster::{accumulate_ledger, backward_with, render_view, AbsMode, BackwardOptions, ViewGradients};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Multi-view perspective training.
    #[default]
    View3d,
    /// A single image fitted with Gaussians in pixel coordinates.
    Image2d,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "view3d" => Ok(Regime::View3d),
            "image2d" => Ok(Regime::Image2d),
            _ => Err(Error::InvalidConfig(format!("unknown regime {s:?} (expected view3d or image2d)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub densify: DensifyConfig,
    pub loss_lambda_dssim: f64,
    pub lr: LearningRates,
    pub regime: Regime,
    pub seed: u64,
    pub background: [f64; 3],
    pub abs_mode: AbsMode,
    /// Iterations per metrics row.
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30000,
            densify: DensifyConfig::default(),
            loss_lambda_dssim: 0.2,
            lr: LearningRates::default(),
            regime: Regime::View3d,
            seed: 0,
            background: [0.0; 3],
            abs_mode: AbsMode::Pixel,
            log_interval: 100,
        }
    }
}

impl TrainConfig {
    /// Defaults for the single-image regime: no opacity resets, no guard caps.
    pub fn image2d() -> Self {
        let mut c = Self {
            regime: Regime::Image2d,
            ..Default::default()
        };
        c.densify.guard_caps = false;
        c.densify.opacity_reset_interval = 0;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.densify.validate()?;
        if !(0.0..=1.0).contains(&self.loss_lambda_dssim) {
            return Err(Error::InvalidConfig("loss_lambda_dssim must be in [0, 1]".into()));
        }
        if self.densify.enabled && self.iterations < self.densify.densify_until {
            return Err(Error::InvalidConfig(format!(
                "iterations ({}) must be >= densify_until ({})",
                self.iterations, self.densify.densify_until
            )));
        }
        if self.log_interval == 0 {
            return Err(Error::InvalidConfig("log_interval must be >= 1".into()));
        }
        Ok(())
    }
}

/// Flat key/value view of [`TrainConfig`] used by config files and command
/// line overrides. Absent keys keep the current value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub iterations: Option<usize>,
    pub tau_p: Option<f64>,
    pub tau_s: Option<f64>,
    pub strategy: Option<Strategy>,
    pub split_count: Option<usize>,
    pub split_scale_divisor: Option<f64>,
    pub prune_opacity: Option<f64>,
    pub densify: Option<bool>,
    pub densify_from: Option<usize>,
    pub densify_interval: Option<usize>,
    pub densify_until: Option<usize>,
    pub opacity_reset_interval: Option<usize>,
    pub guard_caps: Option<bool>,
    pub loss_lambda_dssim: Option<f64>,
    pub lr_position: Option<f64>,
    pub lr_position_final: Option<f64>,
    pub lr_log_scale: Option<f64>,
    pub lr_rotation: Option<f64>,
    pub lr_opacity: Option<f64>,
    pub lr_color: Option<f64>,
    pub regime: Option<Regime>,
    pub seed: Option<u64>,
    pub background: Option<[f64; 3]>,
    pub abs_mode: Option<AbsMode>,
    pub log_interval: Option<usize>,
}

impl ConfigOverrides {
    /// Reads a `.json` file, or TOML for any other extension. Parse errors
    /// carry line and column.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| Error::InvalidConfig(format!("{}: {}", path.display(), e.replace('\n', " "))))
    }

    /// Keys set in `other` win.
    pub fn merge(&mut self, other: &ConfigOverrides) {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(
            iterations, tau_p, tau_s, strategy, split_count, split_scale_divisor, prune_opacity,
            densify, densify_from, densify_interval, densify_until, opacity_reset_interval,
            guard_caps, loss_lambda_dssim, lr_position, lr_position_final, lr_log_scale,
            lr_rotation, lr_opacity, lr_color, regime, seed, background, abs_mode, log_interval
        );
    }

    pub fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $( if let Some(v) = self.$src { c.$($dst).+ = v; } )*
            };
        }
        set!(
            iterations => iterations,
            tau_p => densify.tau_p,
            tau_s => densify.tau_s,
            strategy => densify.strategy,
            split_count => densify.split_count,
            split_scale_divisor => densify.split_scale_divisor,
            prune_opacity => densify.prune_opacity,
            densify => densify.enabled,
            densify_from => densify.densify_from,
            densify_interval => densify.densify_interval,
            densify_until => densify.densify_until,
            opacity_reset_interval => densify.opacity_reset_interval,
            guard_caps => densify.guard_caps,
            loss_lambda_dssim => loss_lambda_dssim,
            lr_position => lr.position,
            lr_position_final => lr.position_final,
            lr_log_scale => lr.log_scale,
            lr_rotation => lr.rotation,
            lr_opacity => lr.opacity,
            lr_color => lr.color,
            regime => regime,
            seed => seed,
            background => background,
            abs_mode => abs_mode,
            log_interval => log_interval,
        );
    }
}

#[derive(Clone, Debug)]
pub struct TrainView {
    pub name: String,
    pub view: View,
    pub target: Image,
}

impl TrainView {
    pub fn camera(name: impl Into<String>, camera: Camera, target: Image) -> Result<Self> {
        if camera.width != target.width || camera.height != target.height {
            return Err(Error::DimensionMismatch(format!(
                "camera is {}x{}, image is {}x{}",
                camera.width, camera.height, target.width, target.height
            )));
        }
        Ok(Self {
            name: name.into(),
            view: View::Camera(camera),
            target,
        })
    }

    pub fn image(name: impl Into<String>, target: Image) -> Self {
        Self {
            name: name.into(),
            view: View::Identity {
                width: target.width,
                height: target.height,
            },
            target,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    /// Mean training loss over the logging window.
    pub loss: f64,
    /// Mean training-view PSNR over the logging window.
    pub psnr: f64,
    pub num_gaussians: usize,
    pub split_count: usize,
    pub clone_count: usize,
    pub pruned_count: usize,
    pub strategy: Strategy,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "iteration,loss,psnr,num_gaussians,split_count,clone_count,pruned_count,strategy";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.8},{},{},{},{},{},{}",
            self.iteration,
            self.loss,
            metrics::format_psnr(self.psnr),
            self.num_gaussians,
            self.split_count,
            self.clone_count,
            self.pruned_count,
            self.strategy
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(MetricsRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

#[derive(Default)]
struct Window {
    loss: f64,
    psnr: f64,
    count: usize,
    split: usize,
    clone: usize,
    pruned: usize,
}

/// Called with the pre-densification cloud (ledger filled) at every
/// densification step.
pub type DensifyHook = Box<dyn FnMut(usize, &GaussianCloud, &SelectionReport)>;

pub struct Trainer {
    pub config: TrainConfig,
    pub cloud: GaussianCloud,
    pub views: Vec<TrainView>,
    pub scale: SceneScale,
    /// Where a non-finite abort writes its diagnostic dump.
    pub dump_dir: Option<PathBuf>,
    adam: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    iteration: usize,
    log: Vec<MetricsRow>,
    window: Window,
    hook: Option<DensifyHook>,
}

/// Scene extent and image size for a set of views: the camera-sphere
/// extent in 3D, the image diagonal (pixels) in 2D.
pub fn scene_scale(views: &[TrainView]) -> SceneScale {
    let image_size = views
        .iter()
        .map(|v| v.view.width().max(v.view.height()))
        .max()
        .unwrap_or(1);
    let cameras: Vec<Camera> = views
        .iter()
        .filter_map(|v| match &v.view {
            View::Camera(c) => Some(c.clone()),
            View::Identity { .. } => None,
        })
        .collect();
    let extent = if cameras.is_empty() {
        views
            .iter()
            .map(|v| (v.view.width() as f64).hypot(v.view.height() as f64))
            .fold(1.0, f64::max)
    } else {
        scene_extent(&cameras)
    };
    SceneScale { extent, image_size }
}

impl Trainer {
    pub fn new(cloud: GaussianCloud, views: Vec<TrainView>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if views.is_empty() {
            return Err(Error::NoViews);
        }
        cloud.validate().map_err(Error::InvalidConfig)?;
        let scale = scene_scale(&views);
        let adam = Adam::new(&cloud, config.lr.clone(), scale.extent, config.iterations);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            order: Vec::new(),
            cursor: 0,
            iteration: 0,
            log: Vec::new(),
            window: Window::default(),
            hook: None,
            dump_dir: None,
            adam,
            scale,
            views,
            cloud,
            config,
        })
    }

    pub fn set_densify_hook(&mut self, hook: DensifyHook) {
        self.hook = Some(hook);
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn log(&self) -> &[MetricsRow] {
        &self.log
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    fn next_view(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.views.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// Runs one iteration.
    pub fn step(&mut self) -> Result<()> {
        let it = self.iteration + 1;
        let vi = self.next_view();
        let tv = &self.views[vi];
        let (projected, image, artifacts) = render_view(&self.cloud, &tv.view, self.config.background)?;
        let (value, image_grad) = loss::photometric(&image, &tv.target, self.config.loss_lambda_dssim)?;
        if !value.is_finite() {
            return Err(self.abort(it, format!("loss is {value} on view {}", tv.name)));
        }
        let psnr = metrics::psnr(&image, &tv.target)?;
        let grads = backward_with(
            &self.cloud,
            &tv.view,
            &projected,
            &artifacts,
            &image_grad,
            BackwardOptions {
                abs_mode: self.config.abs_mode,
            },
        )?;
        if let Some(detail) = non_finite_gradient(&grads) {
            return Err(self.abort(it, detail));
        }
        let d = &self.config.densify;
        if d.enabled && it <= d.densify_until {
            accumulate_ledger(&mut self.cloud, &grads);
        }
        self.adam.step(&mut self.cloud, &grads, it);
        self.cloud.normalize_rotations();

        if self.config.densify.is_densify_step(it) {
            self.densify(it);
        }
        let d = &self.config.densify;
        if self.config.regime == Regime::View3d
            && d.enabled
            && d.opacity_reset_interval > 0
            && it % d.opacity_reset_interval == 0
            && it <= d.densify_until
        {
            let cap = logit(0.01);
            self.cloud.opacity_logits.iter_mut().for_each(|o| *o = o.min(cap));
            self.adam.reset_opacity_state();
        }

        self.iteration = it;
        self.window.loss += value;
        self.window.psnr += psnr;
        self.window.count += 1;
        if it % self.config.log_interval == 0 || it == self.config.iterations {
            let w = std::mem::take(&mut self.window);
            self.log.push(MetricsRow {
                iteration: it,
                loss: w.loss / w.count as f64,
                psnr: w.psnr / w.count as f64,
                num_gaussians: self.cloud.len(),
                split_count: w.split,
                clone_count: w.clone,
                pruned_count: w.pruned,
                strategy: self.config.densify.strategy,
            });
        }
        Ok(())
    }

    fn densify(&mut self, it: usize) {
        let report = densify::select(&self.cloud, &self.config.densify.at_iteration(it), self.scale);
        if let Some(hook) = self.hook.as_mut() {
            hook(it, &self.cloud, &report);
        }
        let seed = self.config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ it as u64;
        let (cloud, origins) = densify::apply(&self.cloud, &report, &self.config.densify.at_iteration(it), seed);
        self.adam.remap(&origins);
        self.cloud = cloud;
        self.window.split += report.counts.split;
        self.window.clone += report.counts.clone;
        self.window.pruned += report.counts.pruned;
    }

    fn abort(&self, iteration: usize, detail: String) -> Error {
        if let Some(dir) = &self.dump_dir {
            let _ = std::fs::create_dir_all(dir);
            let _ = ply::save(&self.cloud, &dir.join("nonfinite_cloud.ply"));
            let info = serde_json::json!({
                "iteration": iteration,
                "detail": detail,
                "num_gaussians": self.cloud.len(),
            });
            let _ = std::fs::write(dir.join("nonfinite.json"), info.to_string());
        }
        Error::NonFinite { iteration, detail }
    }

    /// Runs to completion, calling `after_step` after every iteration.
    pub fn run_with(&mut self, mut after_step: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            self.step()?;
            after_step(self)?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_| Ok(()))
    }
}

fn non_finite_gradient(g: &ViewGradients) -> Option<String> {
    for i in 0..g.len() {
        let ok = g.d_positions[i].iter().all(|v| v.is_finite())
            && g.d_log_scales[i].iter().all(|v| v.is_finite())
            && g.d_rotations[i].iter().all(|v| v.is_finite())
            && g.d_opacity_logits[i].is_finite();
        if !ok {
            return Some(format!("non-finite gradient for gaussian {i}"));
        }
    }
    None
}

/// Trains to completion and returns the cloud with its metrics log.
pub fn train(cloud: GaussianCloud, views: Vec<TrainView>, config: TrainConfig) -> Result<(GaussianCloud, Vec<MetricsRow>)> {
    let mut t = Trainer::new(cloud, views, config)?;
    t.run()?;
    Ok((t.cloud, t.log))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

/// Mean PSNR, SSIM and L1 of the cloud's renders over `views`. SSIM is NaN
/// when a view is smaller than the SSIM window.
pub fn evaluate(cloud: &GaussianCloud, views: &[TrainView], background: [f64; 3]) -> Result<Evaluation> {
    let mut e = Evaluation {
        psnr: 0.0,
        ssim: 0.0,
        l1: 0.0,
    };
    for v in views {
        let img = render_view(cloud, &v.view, background)?.1;
        e.psnr += metrics::psnr(&img, &v.target)?;
        e.ssim += metrics::ssim(&img, &v.target).unwrap_or(f64::NAN);
        e.l1 += loss::l1(&img, &v.target)?.0;
    }
    let n = views.len().max(1) as f64;
    e.psnr /= n;
    e.ssim /= n;
    e.l1 /= n;
    Ok(e)
}

/// Parameter-array footprint at f32: position, log-scale, rotation,
/// opacity and color coefficients.
pub fn memory_bytes(cloud: &GaussianCloud) -> usize {
    cloud.len() * (11 + 3 * cloud.coeffs_per_gaussian()) * 4
}
