//! Adam over the five parameter groups of a [`GaussianCloud`].
//!
//! Updates are row-sparse: a row whose gradient in a group is exactly zero
//! keeps its parameters and moments untouched, and bias correction uses a
//! per-row step count. Rows that did not contribute to the current view
//! therefore do not drift on stale momentum.

use serde::{Deserialize, Serialize};

use crate::densify::RowOrigin;
use crate::gaussian::GaussianCloud;
use crate::raster::ViewGradients;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Initial position rate, multiplied by the scene extent.
    pub position: f64,
    /// Final position rate, reached log-linearly at the last iteration.
    pub position_final: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    /// Rate of the constant color term; higher-order terms use 1/20 of it.
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
        }
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

#[derive(Clone, Debug, Default, PartialEq)]
struct Group {
    width: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: Vec<u32>,
}

impl Group {
    fn new(width: usize, rows: usize) -> Self {
        Self {
            width,
            m: vec![0.0; width * rows],
            v: vec![0.0; width * rows],
            steps: vec![0; rows],
        }
    }

    /// `lr_of(j)` gives the rate of column `j` within the row.
    fn step(&mut self, params: &mut [f64], grads: &[f64], lr_of: impl Fn(usize) -> f64) {
        let w = self.width;
        for r in 0..self.steps.len() {
            let g = &grads[r * w..(r + 1) * w];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            self.steps[r] += 1;
            let t = self.steps[r] as i32;
            let c1 = 1.0 - BETA1.powi(t);
            let c2 = 1.0 - BETA2.powi(t);
            for j in 0..w {
                let k = r * w + j;
                self.m[k] = BETA1 * self.m[k] + (1.0 - BETA1) * g[j];
                self.v[k] = BETA2 * self.v[k] + (1.0 - BETA2) * g[j] * g[j];
                let mh = self.m[k] / c1;
                let vh = self.v[k] / c2;
                params[k] -= lr_of(j) * mh / (vh.sqrt() + EPSILON);
            }
        }
    }

    fn remap(&self, origins: &[RowOrigin]) -> Self {
        let w = self.width;
        let mut out = Group::new(w, origins.len());
        for (r, o) in origins.iter().enumerate() {
            if let Some(old) = o.kept() {
                out.m[r * w..(r + 1) * w].copy_from_slice(&self.m[old * w..(old + 1) * w]);
                out.v[r * w..(r + 1) * w].copy_from_slice(&self.v[old * w..(old + 1) * w]);
                out.steps[r] = self.steps[old];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub rates: LearningRates,
    /// World scale applied to the position rate.
    pub extent: f64,
    /// Iteration at which the position rate reaches its final value.
    pub max_steps: usize,
    groups: [Group; 5],
}

const POS: usize = 0;
const SCALE: usize = 1;
const ROT: usize = 2;
const OPA: usize = 3;
const COL: usize = 4;

impl Adam {
    pub fn new(cloud: &GaussianCloud, rates: LearningRates, extent: f64, max_steps: usize) -> Self {
        let n = cloud.len();
        let k = cloud.coeffs_per_gaussian();
        Self {
            rates,
            extent,
            max_steps,
            groups: [
                Group::new(3, n),
                Group::new(3, n),
                Group::new(4, n),
                Group::new(1, n),
                Group::new(3 * k, n),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.groups[POS].steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position rate at 1-based `iteration`.
    pub fn position_rate(&self, iteration: usize) -> f64 {
        let t = if self.max_steps == 0 {
            1.0
        } else {
            (iteration as f64 / self.max_steps as f64).clamp(0.0, 1.0)
        };
        let (a, b) = (self.rates.position, self.rates.position_final);
        ((1.0 - t) * a.ln() + t * b.ln()).exp() * self.extent
    }

    pub fn step(&mut self, cloud: &mut GaussianCloud, grads: &ViewGradients, iteration: usize) {
        assert_eq!(cloud.len(), self.len(), "optimizer rows out of sync with cloud");
        let pos_lr = self.position_rate(iteration);
        let r = self.rates.clone();

        let flat3 = |v: &[nalgebra::Vector3<f64>]| v.iter().flat_map(|x| x.iter().copied()).collect::<Vec<f64>>();
        let mut buf = flat3(&cloud.positions);
        self.groups[POS].step(&mut buf, &flat3(&grads.d_positions), |_| pos_lr);
        unflat3(&buf, &mut cloud.positions);

        let mut buf = flat3(&cloud.log_scales);
        self.groups[SCALE].step(&mut buf, &flat3(&grads.d_log_scales), |_| r.log_scale);
        unflat3(&buf, &mut cloud.log_scales);

        let mut buf: Vec<f64> = cloud.rotations.iter().flat_map(|x| x.iter().copied()).collect();
        let g: Vec<f64> = grads.d_rotations.iter().flat_map(|x| x.iter().copied()).collect();
        self.groups[ROT].step(&mut buf, &g, |_| r.rotation);
        for (q, c) in cloud.rotations.iter_mut().zip(buf.chunks_exact(4)) {
            q.copy_from_slice(c);
        }

        self.groups[OPA].step(&mut cloud.opacity_logits, &grads.d_opacity_logits, |_| r.opacity);

        let mut buf: Vec<f64> = cloud.color_coeffs.iter().flatten().copied().collect();
        let g: Vec<f64> = grads.d_color_coeffs.iter().flatten().copied().collect();
        self.groups[COL].step(&mut buf, &g, |j| if j < 3 { r.color } else { r.color / 20.0 });
        for (c, v) in cloud.color_coeffs.iter_mut().zip(buf.chunks_exact(3)) {
            c.copy_from_slice(v);
        }
    }

    /// Rebuilds the moments after densification: kept rows carry their state,
    /// new rows start from zero.
    pub fn remap(&mut self, origins: &[RowOrigin]) {
        for g in self.groups.iter_mut() {
            *g = g.remap(origins);
        }
    }

    /// Zeroes the opacity moments, used after an opacity reset.
    pub fn reset_opacity_state(&mut self) {
        let n = self.len();
        self.groups[OPA] = Group::new(1, n);
    }

    /// First and second moments of the position group for row `i`, for
    /// inspection in tests.
    pub fn position_moments(&self, i: usize) -> ([f64; 3], [f64; 3], u32) {
        let g = &self.groups[POS];
        let m = [g.m[3 * i], g.m[3 * i + 1], g.m[3 * i + 2]];
        let v = [g.v[3 * i], g.v[3 * i + 1], g.v[3 * i + 2]];
        (m, v, g.steps[i])
    }
}

fn unflat3(buf: &[f64], out: &mut [nalgebra::Vector3<f64>]) {
    for (p, c) in out.iter_mut().zip(buf.chunks_exact(3)) {
        p.copy_from_slice(c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_identity_scene;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize) -> (GaussianCloud, ViewGradients) {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let c = random_identity_scene(&mut rng, n, 16, 16).cloud;
        let mut g = ViewGradients::zeros(n, c.coeffs_per_gaussian());
        for i in 0..n {
            g.d_positions[i] = nalgebra::Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            g.d_log_scales[i] = nalgebra::Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            g.d_opacity_logits[i] = rng.gen_range(-1.0..1.0);
            g.d_color_coeffs[i] = [rng.gen_range(-1.0..1.0); 3];
        }
        (c, g)
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let (mut c, _) = setup(5);
        let before = c.clone();
        let mut adam = Adam::new(&c, LearningRates::default(), 1.0, 100);
        adam.step(&mut c, &ViewGradients::zeros(5, 1), 1);
        assert_eq!(c, before);
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        // With bias correction the first update is lr * g / |g|.
        let (mut c, g) = setup(3);
        let before = c.clone();
        let mut adam = Adam::new(&c, LearningRates::default(), 2.0, 100);
        adam.step(&mut c, &g, 0);
        for i in 0..3 {
            for k in 0..3 {
                let d = c.positions[i][k] - before.positions[i][k];
                let want = -1.6e-4 * 2.0 * g.d_positions[i][k].signum();
                assert!((d - want).abs() < 1e-15);
                let d = c.log_scales[i][k] - before.log_scales[i][k];
                assert!((d + 5e-3 * g.d_log_scales[i][k].signum()).abs() < 1e-15);
            }
            assert!((c.opacity_logits[i] - before.opacity_logits[i] + 5e-2 * g.d_opacity_logits[i].signum()).abs() < 1e-14);
            assert_eq!(c.rotations[i], before.rotations[i]);
        }
    }

    #[test]
    fn matches_textbook_adam_on_a_quadratic() {
        // minimise (x - 3)^2 for one opacity logit
        let (mut c, _) = setup(1);
        c.opacity_logits[0] = 0.0;
        let rates = LearningRates { opacity: 0.1, ..Default::default() };
        let mut adam = Adam::new(&c, rates, 1.0, 100);
        let (mut x, mut m, mut v) = (0.0f64, 0.0, 0.0);
        for t in 1..=50 {
            let mut g = ViewGradients::zeros(1, 1);
            g.d_opacity_logits[0] = 2.0 * (c.opacity_logits[0] - 3.0);
            adam.step(&mut c, &g, t);
            let gr = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            x -= 0.1 * mh / (vh.sqrt() + 1e-15);
            assert!((c.opacity_logits[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn position_rate_decays_log_linearly() {
        let (c, _) = setup(1);
        let adam = Adam::new(&c, LearningRates::default(), 10.0, 1000);
        assert!((adam.position_rate(0) - 1.6e-3).abs() < 1e-15);
        assert!((adam.position_rate(1000) - 1.6e-5).abs() < 1e-17);
        assert!((adam.position_rate(500) - 1.6e-4).abs() < 1e-15);
        assert_eq!(adam.position_rate(5000), adam.position_rate(1000));
    }

    #[test]
    fn remap_preserves_kept_moments() {
        let (mut c, g) = setup(4);
        let mut adam = Adam::new(&c, LearningRates::default(), 1.0, 100);
        adam.step(&mut c, &g, 1);
        adam.step(&mut c, &g, 2);
        let before: Vec<_> = (0..4).map(|i| adam.position_moments(i)).collect();
        let origins = [RowOrigin::Kept(3), RowOrigin::Kept(1), RowOrigin::Cloned(1), RowOrigin::SplitChild(0)];
        adam.remap(&origins);
        assert_eq!(adam.len(), 4);
        assert_eq!(adam.position_moments(0), before[3]);
        assert_eq!(adam.position_moments(1), before[1]);
        assert_eq!(adam.position_moments(2), ([0.0; 3], [0.0; 3], 0));
        assert_eq!(adam.position_moments(3), ([0.0; 3], [0.0; 3], 0));
    }
}
