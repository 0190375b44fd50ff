//! Adaptive density control: clone, split and prune.
//!
//! Clone always uses the signed view-space gradient. Split uses either the
//! signed gradient (`Strategy::Baseline`) or the homodirectional one
//! (`Strategy::Abs`).

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{rotation_matrix, GaussianCloud};
use crate::image::Image;
use crate::project::View;
use crate::raster::render_view;
use crate::sh;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Baseline,
    Abs,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Abs => "abs",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Strategy::Baseline),
            "abs" => Ok(Strategy::Abs),
            _ => Err(Error::InvalidConfig(format!("unknown strategy {s:?} (expected baseline or abs)"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    /// Gradient threshold on the per-view averaged norm, loss per pixel.
    pub tau_p: f64,
    /// Scale threshold as a fraction of the scene extent.
    pub tau_s: f64,
    pub strategy: Strategy,
    pub split_count: usize,
    pub split_scale_divisor: f64,
    pub prune_opacity: f64,
    pub densify_from: usize,
    pub densify_interval: usize,
    pub densify_until: usize,
    /// 0 disables opacity resets.
    pub opacity_reset_interval: usize,
    /// Prune Gaussians larger than `0.1 * extent` in world space or wider
    /// than 20% of the image on screen.
    pub guard_caps: bool,
    /// Master switch; when false the Gaussian count never changes.
    pub enabled: bool,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            tau_p: 0.0002,
            tau_s: 0.01,
            strategy: Strategy::Baseline,
            split_count: 2,
            split_scale_divisor: 1.6,
            prune_opacity: 0.005,
            densify_from: 500,
            densify_interval: 100,
            densify_until: 15000,
            opacity_reset_interval: 3000,
            guard_caps: true,
            enabled: true,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.tau_p > 0.0) {
            return bad("tau_p must be > 0");
        }
        if !(self.tau_s > 0.0) {
            return bad("tau_s must be > 0");
        }
        if self.split_count < 2 {
            return bad("split_count must be >= 2");
        }
        if !(self.split_scale_divisor > 1.0) {
            return bad("split_scale_divisor must be > 1");
        }
        if self.densify_interval == 0 {
            return bad("densify_interval must be >= 1");
        }
        if !(0.0..1.0).contains(&self.prune_opacity) {
            return bad("prune_opacity must be in [0, 1)");
        }
        Ok(())
    }

    /// The settings in force at iteration `it`: the guard caps only engage
    /// once the first opacity reset has passed, so early, still-large
    /// primitives are not culled before they get a chance to shrink.
    pub fn at_iteration(&self, it: usize) -> DensifyConfig {
        let caps = self.guard_caps && (self.opacity_reset_interval == 0 || it > self.opacity_reset_interval);
        DensifyConfig { guard_caps: caps, ..self.clone() }
    }

    /// Whether densification runs after iteration `it` (1-based).
    pub fn is_densify_step(&self, it: usize) -> bool {
        self.enabled
            && it >= self.densify_from
            && it <= self.densify_until
            && it % self.densify_interval == 0
    }
}

/// Where the cloud lives: world extent and the largest image side, used by
/// the scale threshold and the guard caps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScale {
    pub extent: f64,
    pub image_size: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionCounts {
    pub total: usize,
    pub split: usize,
    pub clone: usize,
    pub pruned: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub strategy: Strategy,
    pub split_ids: Vec<usize>,
    pub clone_ids: Vec<usize>,
    pub pruned_ids: Vec<usize>,
    /// Per Gaussian, the averaged gradient compared against `tau_p` for the
    /// split decision.
    pub split_criterion_values: Vec<f64>,
    pub counts: SelectionCounts,
}

impl SelectionReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Classifies every Gaussian from the accumulated ledger. Gaussians that
/// will be pruned are excluded from the clone and split sets.
pub fn select(cloud: &GaussianCloud, config: &DensifyConfig, scale: SceneScale) -> SelectionReport {
    let n = cloud.len();
    let ledger = &cloud.ledger;
    let scale_cap = config.tau_s * scale.extent;
    let mut report = SelectionReport {
        strategy: config.strategy,
        split_criterion_values: Vec::with_capacity(n),
        ..Default::default()
    };
    for i in 0..n {
        let criterion = match config.strategy {
            Strategy::Baseline => ledger.avg_signed(i),
            Strategy::Abs => ledger.avg_homodir(i),
        };
        report.split_criterion_values.push(criterion);
        if prunable(cloud, i, config, scale) {
            report.pruned_ids.push(i);
            continue;
        }
        if ledger.view_count[i] == 0 {
            continue;
        }
        let big = cloud.max_scale(i) > scale_cap;
        if big && criterion > config.tau_p {
            report.split_ids.push(i);
        } else if !big && ledger.avg_signed(i) > config.tau_p {
            report.clone_ids.push(i);
        }
    }
    report.counts = SelectionCounts {
        total: n,
        split: report.split_ids.len(),
        clone: report.clone_ids.len(),
        pruned: report.pruned_ids.len(),
    };
    report
}

fn prunable(cloud: &GaussianCloud, i: usize, config: &DensifyConfig, scale: SceneScale) -> bool {
    if cloud.opacity(i) < config.prune_opacity {
        return true;
    }
    config.guard_caps
        && (cloud.max_scale(i) > 0.1 * scale.extent
            || cloud.ledger.max_screen_radius[i] > 0.2 * scale.image_size as f64)
}

/// Origin of each row after [`apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowOrigin {
    /// Unchanged row carried over from this pre-densify index.
    Kept(usize),
    Cloned(usize),
    SplitChild(usize),
}

impl RowOrigin {
    pub fn kept(self) -> Option<usize> {
        match self {
            RowOrigin::Kept(i) => Some(i),
            _ => None,
        }
    }
}

/// Executes a selection. The result holds the surviving rows in their
/// original order, then clones, then split children; the ledger is reset.
pub fn apply(
    cloud: &GaussianCloud,
    report: &SelectionReport,
    config: &DensifyConfig,
    seed: u64,
) -> (GaussianCloud, Vec<RowOrigin>) {
    let n = cloud.len();
    let mut removed = vec![false; n];
    for &i in report.pruned_ids.iter().chain(&report.split_ids) {
        removed[i] = true;
    }
    let mut origin: Vec<RowOrigin> = (0..n).filter(|&i| !removed[i]).map(RowOrigin::Kept).collect();
    origin.extend(report.clone_ids.iter().map(|&i| RowOrigin::Cloned(i)));
    let mut source: Vec<usize> = origin
        .iter()
        .map(|o| match *o {
            RowOrigin::Kept(i) | RowOrigin::Cloned(i) | RowOrigin::SplitChild(i) => i,
        })
        .collect();
    let first_child = source.len();
    for &i in &report.split_ids {
        for _ in 0..config.split_count {
            origin.push(RowOrigin::SplitChild(i));
            source.push(i);
        }
    }

    let mut out = cloud.select_rows(&source);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shrink = config.split_scale_divisor.ln();
    for row in first_child..out.len() {
        let parent = source[row];
        let r = rotation_matrix(&cloud.rotations[parent]);
        let s = cloud.scales(parent);
        let z = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
        out.positions[row] = r * s.component_mul(&z) + cloud.positions[parent];
        out.log_scales[row] = cloud.log_scales[parent].add_scalar(-shrink);
    }
    out.reset_ledger();
    (out, origin)
}

/// Renders the cloud with `selected` Gaussians painted white and every other
/// Gaussian's color dimmed to 30%.
pub fn selection_mask(cloud: &GaussianCloud, view: &View, selected: &[usize], background: [f64; 3]) -> Result<Image> {
    let mut painted = cloud.clone();
    let mut is_selected = vec![false; cloud.len()];
    for &i in selected {
        is_selected[i] = true;
    }
    for (i, &sel) in is_selected.iter().enumerate() {
        let coeffs = painted.coeffs_mut(i);
        if sel {
            coeffs.fill([0.0; 3]);
            coeffs[0] = [sh::dc_from_color(1.0); 3];
        } else {
            // max(0, 0.3 (raw + 0.5)) = 0.3 max(0, raw + 0.5)
            let shift = (0.3 * 0.5 - 0.5) / sh::Y00;
            for (k, c) in coeffs.iter_mut().enumerate() {
                for v in c.iter_mut() {
                    *v = 0.3 * *v + if k == 0 { shift } else { 0.0 };
                }
            }
        }
    }
    Ok(render_view(&painted, view, background)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{logit, GaussianRow};
    use crate::raster::render_naive;
    use nalgebra::Vector4;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use super::Strategy;

    fn cloud_from(rows: &[(f64, f64, f64, f64)]) -> GaussianCloud {
        // (x, sigma, opacity, gray)
        let mut c = GaussianCloud::new(0);
        for &(x, s, o, g) in rows {
            c.push(GaussianRow {
                position: Vector3::new(x, 8.0, 1.0 + x * 0.01),
                log_scale: Vector3::new(s.ln(), (s * 0.7).ln(), s.ln()),
                rotation: Vector4::new(0.9, 0.1, -0.2, 0.3),
                opacity_logit: logit(o),
                coeffs: vec![[sh::dc_from_color(g); 3]],
            });
        }
        c
    }

    const SCALE: SceneScale = SceneScale {
        extent: 100.0,
        image_size: 32,
    };

    #[test]
    fn empty_ledger_selects_nothing() {
        let c = cloud_from(&[(4.0, 1.0, 0.5, 0.5), (10.0, 5.0, 0.5, 0.5)]);
        let r = select(&c, &DensifyConfig::default(), SCALE);
        assert!(r.split_ids.is_empty() && r.clone_ids.is_empty() && r.pruned_ids.is_empty());
    }

    #[test]
    fn clone_uses_signed_and_split_uses_strategy() {
        let mut c = cloud_from(&[(4.0, 0.5, 0.5, 0.5), (10.0, 5.0, 0.5, 0.5), (20.0, 5.0, 0.5, 0.5)]);
        c.ledger.view_count = vec![2, 2, 2];
        c.ledger.signed_accum = vec![0.001, 0.0001, 0.001];
        c.ledger.homodir_accum = vec![0.002, 0.003, 0.002];
        let mut cfg = DensifyConfig {
            guard_caps: false,
            ..Default::default()
        };
        let r = select(&c, &cfg, SCALE);
        assert_eq!(r.clone_ids, vec![0]);
        assert_eq!(r.split_ids, vec![2]);
        cfg.strategy = Strategy::Abs;
        let r = select(&c, &cfg, SCALE);
        assert_eq!(r.clone_ids, vec![0]);
        assert_eq!(r.split_ids, vec![1, 2]);
        assert_eq!(r.split_criterion_values[1], 0.0015);
    }

    #[test]
    fn pruned_rows_are_not_densified() {
        let mut c = cloud_from(&[(4.0, 0.5, 0.001, 0.5), (10.0, 50.0, 0.5, 0.5)]);
        c.ledger.view_count = vec![1, 1];
        c.ledger.signed_accum = vec![1.0, 1.0];
        c.ledger.homodir_accum = vec![1.0, 1.0];
        let cfg = DensifyConfig::default();
        let r = select(&c, &cfg, SCALE);
        assert_eq!(r.pruned_ids, vec![0, 1]);
        let r = select(&c, &DensifyConfig { guard_caps: false, ..cfg }, SCALE);
        assert_eq!(r.pruned_ids, vec![0]);
        assert_eq!(r.split_ids, vec![1]);
    }

    #[test]
    fn guard_caps_wait_for_first_opacity_reset() {
        let cfg = DensifyConfig::default();
        assert!(!cfg.at_iteration(cfg.opacity_reset_interval).guard_caps);
        assert!(cfg.at_iteration(cfg.opacity_reset_interval + 1).guard_caps);
        let no_reset = DensifyConfig { opacity_reset_interval: 0, ..cfg.clone() };
        assert!(no_reset.at_iteration(1).guard_caps);
        let off = DensifyConfig { guard_caps: false, ..cfg };
        assert!(!off.at_iteration(100_000).guard_caps);
    }

    proptest! {
        #[test]
        fn baseline_split_set_is_subset_of_abs(
            rows in proptest::collection::vec((0.0f64..1e-3, 1.0f64..4.0, 0.1f64..8.0, 1u32..5), 1..40),
            tau_p in 1e-5f64..1e-3,
        ) {
            let mut c = GaussianCloud::new(0);
            for (k, &(signed, ratio, sigma, views)) in rows.iter().enumerate() {
                c.push(GaussianRow {
                    position: Vector3::new(k as f64, 0.0, 1.0),
                    log_scale: Vector3::repeat(sigma.ln()),
                    rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
                    opacity_logit: 0.0,
                    coeffs: vec![[0.0; 3]],
                });
                c.ledger.view_count[k] = views;
                c.ledger.signed_accum[k] = signed * views as f64;
                c.ledger.homodir_accum[k] = signed * ratio * views as f64;
            }
            let base = DensifyConfig { tau_p, guard_caps: false, ..Default::default() };
            let abs = DensifyConfig { strategy: Strategy::Abs, ..base.clone() };
            let rb = select(&c, &base, SCALE);
            let ra = select(&c, &abs, SCALE);
            prop_assert!(rb.split_ids.iter().all(|i| ra.split_ids.contains(i)));
            prop_assert_eq!(&rb.clone_ids, &ra.clone_ids);
            prop_assert!(ra.split_ids.iter().all(|i| !ra.clone_ids.contains(i)));
        }
    }

    fn report(split: Vec<usize>, clone: Vec<usize>, pruned: Vec<usize>) -> SelectionReport {
        SelectionReport {
            split_ids: split,
            clone_ids: clone,
            pruned_ids: pruned,
            ..Default::default()
        }
    }

    #[test]
    fn clone_duplicates_rows() {
        let c = cloud_from(&[(4.0, 1.0, 0.5, 0.2), (10.0, 2.0, 0.6, 0.8)]);
        let (out, origin) = apply(&c, &report(vec![], vec![1], vec![]), &DensifyConfig::default(), 0);
        assert_eq!(out.len(), 3);
        assert_eq!(out.row(2), c.row(1));
        assert_eq!(origin, vec![RowOrigin::Kept(0), RowOrigin::Kept(1), RowOrigin::Cloned(1)]);
    }

    #[test]
    fn clone_renders_as_a_doubled_composite() {
        let c = cloud_from(&[(12.0, 3.0, 0.4, 0.9)]);
        let (out, _) = apply(&c, &report(vec![], vec![0], vec![]), &DensifyConfig::default(), 0);
        let view = View::Identity { width: 24, height: 16 };
        let img = render_view(&out, &view, [0.1; 3]).unwrap().1;
        let mut p = view.project(&c);
        let mut twin = p[0].clone();
        twin.source = 1;
        p.push(twin);
        assert_eq!(img, render_naive(&p, 24, 16, [0.1; 3]).unwrap());
    }

    #[test]
    fn split_children_shrink_by_divisor() {
        let c = cloud_from(&[(4.0, 1.0, 0.5, 0.2), (10.0, 2.0, 0.6, 0.8)]);
        let cfg = DensifyConfig::default();
        let (out, origin) = apply(&c, &report(vec![0], vec![], vec![]), &cfg, 7);
        assert_eq!(out.len(), 3);
        assert_eq!(origin[1..], [RowOrigin::SplitChild(0), RowOrigin::SplitChild(0)]);
        for row in 1..3 {
            let d = out.log_scales[row] - c.log_scales[0];
            assert!(d.iter().all(|v| (v + 1.6f64.ln()).abs() < 1e-15));
            assert_eq!(out.rotations[row], c.rotations[0]);
            assert_eq!(out.opacity_logits[row], c.opacity_logits[0]);
        }
        assert_eq!(out, apply(&c, &report(vec![0], vec![], vec![]), &cfg, 7).0);
        assert_ne!(out, apply(&c, &report(vec![0], vec![], vec![]), &cfg, 8).0);
    }

    #[test]
    fn split_children_follow_parent_density() {
        let c = cloud_from(&[(4.0, 1.5, 0.5, 0.2)]);
        let cfg = DensifyConfig {
            split_count: 10_000,
            ..Default::default()
        };
        let (out, _) = apply(&c, &report(vec![0], vec![], vec![]), &cfg, 3);
        let n = out.len() as f64;
        let mean: Vector3<f64> = out.positions.iter().sum::<Vector3<f64>>() / n;
        let cov = c.covariance3d(0);
        for k in 0..3 {
            let se = (cov[(k, k)] / n).sqrt();
            assert!((mean[k] - c.positions[0][k]).abs() < 3.0 * se, "axis {k}");
        }
        // sample covariance close to the parent's
        let mut sc = nalgebra::Matrix3::zeros();
        for p in &out.positions {
            let d = p - c.positions[0];
            sc += d * d.transpose();
        }
        sc /= n;
        assert!((sc - cov).abs().max() < 0.1 * cov.abs().max());
    }

    #[test]
    fn prune_removes_only_transparent_rows() {
        let c = cloud_from(&[(4.0, 1.0, 0.004, 1.0), (10.0, 2.0, 0.6, 0.8), (16.0, 2.0, 0.003, 1.0)]);
        let cfg = DensifyConfig::default();
        let r = select(&c, &cfg, SCALE);
        assert_eq!(r.pruned_ids, vec![0, 2]);
        let (out, origin) = apply(&c, &r, &cfg, 0);
        assert_eq!(out.len(), 1);
        assert_eq!(origin, vec![RowOrigin::Kept(1)]);
        // Alone on black, a pruned Gaussian moves no pixel by more than the
        // prune threshold.
        let view = View::Identity { width: 24, height: 16 };
        for &i in &r.pruned_ids {
            let img = render_view(&c.select_rows(&[i]), &view, [0.0; 3]).unwrap().1;
            assert!(img.pixels.iter().flatten().all(|&v| v <= cfg.prune_opacity));
        }
    }

    #[test]
    fn masks() {
        let c = cloud_from(&[(6.0, 2.0, 0.999, 0.5), (18.0, 2.0, 0.999, 0.5)]);
        let view = View::Identity { width: 24, height: 16 };
        let plain = render_view(&c, &view, [0.0; 3]).unwrap().1;
        let none = selection_mask(&c, &view, &[], [0.0; 3]).unwrap();
        assert!(none.max_abs_diff(&plain.scale(0.3)) < 1e-12);
        let all = selection_mask(&c, &view, &[0, 1], [0.0; 3]).unwrap();
        let mut white = c.clone();
        white.color_coeffs.fill([sh::dc_from_color(1.0); 3]);
        assert!(all.max_abs_diff(&render_view(&white, &view, [0.0; 3]).unwrap().1) < 1e-12);
        let one = selection_mask(&c, &view, &[1], [0.0; 3]).unwrap();
        assert!(one.get(18, 8)[0] > 0.9 && one.get(6, 8)[0] < 0.2);
    }

    #[test]
    fn config_validation() {
        assert!(DensifyConfig::default().validate().is_ok());
        let bad = DensifyConfig {
            split_count: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("abs".parse::<Strategy>().unwrap(), Strategy::Abs);
        assert!("x".parse::<Strategy>().is_err());
        let json = serde_json::to_string(&report(vec![1], vec![2], vec![3])).unwrap();
        assert!(json.contains("\"split_ids\":[1]"));
    }
}
