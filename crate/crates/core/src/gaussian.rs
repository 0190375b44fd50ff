//! Scene representation: a cloud of anisotropic 3D Gaussians plus the
//! per-Gaussian densification accumulators.
//!
//! Covariances are stored factored as `R(q) * diag(exp(s))`, which keeps them
//! positive definite under unconstrained updates. Opacity is stored as a
//! logit and decoded with a sigmoid.

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::sh;

/// Per-Gaussian running sums used by the densification criteria.
///
/// Both accumulators store sums of per-view gradient norms; `view_count`
/// counts the views in which the Gaussian was blended into at least one
/// pixel.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientLedger {
    pub signed_accum: Vec<f64>,
    pub homodir_accum: Vec<f64>,
    pub view_count: Vec<u32>,
    pub max_screen_radius: Vec<f64>,
}

impl GradientLedger {
    pub fn zeros(n: usize) -> Self {
        Self {
            signed_accum: vec![0.0; n],
            homodir_accum: vec![0.0; n],
            view_count: vec![0; n],
            max_screen_radius: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.view_count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.view_count.is_empty()
    }

    pub fn reset(&mut self) {
        let n = self.len();
        *self = Self::zeros(n);
    }

    /// Average of the signed-gradient norms over participating views.
    pub fn avg_signed(&self, i: usize) -> f64 {
        match self.view_count[i] {
            0 => 0.0,
            m => self.signed_accum[i] / m as f64,
        }
    }

    /// Average of the homodirectional-gradient norms over participating views.
    pub fn avg_homodir(&self, i: usize) -> f64 {
        match self.view_count[i] {
            0 => 0.0,
            m => self.homodir_accum[i] / m as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    /// Quaternions stored as `(w, x, y, z)`.
    pub rotations: Vec<Vector4<f64>>,
    pub opacity_logits: Vec<f64>,
    pub sh_degree: usize,
    /// `len() * coeffs_per_gaussian()` entries, one RGB triple per basis
    /// function, Gaussian-major.
    pub color_coeffs: Vec<[f64; 3]>,
    pub ledger: GradientLedger,
}

/// A single Gaussian's parameters, used when building clouds row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianRow {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub opacity_logit: f64,
    pub coeffs: Vec<[f64; 3]>,
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Self {
        assert!(sh_degree <= sh::MAX_DEGREE, "sh degree {sh_degree} > 3");
        Self {
            positions: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            opacity_logits: Vec::new(),
            sh_degree,
            color_coeffs: Vec::new(),
            ledger: GradientLedger::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn coeffs_per_gaussian(&self) -> usize {
        sh::coeff_count(self.sh_degree)
    }

    pub fn push(&mut self, row: GaussianRow) {
        let k = self.coeffs_per_gaussian();
        let mut coeffs = row.coeffs;
        coeffs.resize(k, [0.0; 3]);
        self.positions.push(row.position);
        self.log_scales.push(row.log_scale);
        self.rotations.push(row.rotation);
        self.opacity_logits.push(row.opacity_logit);
        self.color_coeffs.extend_from_slice(&coeffs);
        self.ledger.signed_accum.push(0.0);
        self.ledger.homodir_accum.push(0.0);
        self.ledger.view_count.push(0);
        self.ledger.max_screen_radius.push(0.0);
    }

    pub fn row(&self, i: usize) -> GaussianRow {
        GaussianRow {
            position: self.positions[i],
            log_scale: self.log_scales[i],
            rotation: self.rotations[i],
            opacity_logit: self.opacity_logits[i],
            coeffs: self.coeffs(i).to_vec(),
        }
    }

    pub fn coeffs(&self, i: usize) -> &[[f64; 3]] {
        let k = self.coeffs_per_gaussian();
        &self.color_coeffs[i * k..(i + 1) * k]
    }

    pub fn coeffs_mut(&mut self, i: usize) -> &mut [[f64; 3]] {
        let k = self.coeffs_per_gaussian();
        &mut self.color_coeffs[i * k..(i + 1) * k]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn scales(&self, i: usize) -> Vector3<f64> {
        self.log_scales[i].map(f64::exp)
    }

    pub fn max_scale(&self, i: usize) -> f64 {
        self.scales(i).max()
    }

    /// Full 3D covariance `R S S^T R^T` of Gaussian `i`.
    pub fn covariance3d(&self, i: usize) -> Matrix3<f64> {
        covariance_from(&self.rotations[i], &self.log_scales[i])
    }

    pub fn reset_ledger(&mut self) {
        self.ledger = GradientLedger::zeros(self.len());
    }

    /// New cloud containing rows `indices` in that order; the ledger is
    /// carried along.
    pub fn select_rows(&self, indices: &[usize]) -> GaussianCloud {
        let k = self.coeffs_per_gaussian();
        let mut out = GaussianCloud::new(self.sh_degree);
        out.positions = indices.iter().map(|&i| self.positions[i]).collect();
        out.log_scales = indices.iter().map(|&i| self.log_scales[i]).collect();
        out.rotations = indices.iter().map(|&i| self.rotations[i]).collect();
        out.opacity_logits = indices.iter().map(|&i| self.opacity_logits[i]).collect();
        out.color_coeffs = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            out.color_coeffs.extend_from_slice(self.coeffs(i));
        }
        out.ledger = GradientLedger {
            signed_accum: indices.iter().map(|&i| self.ledger.signed_accum[i]).collect(),
            homodir_accum: indices.iter().map(|&i| self.ledger.homodir_accum[i]).collect(),
            view_count: indices.iter().map(|&i| self.ledger.view_count[i]).collect(),
            max_screen_radius: indices
                .iter()
                .map(|&i| self.ledger.max_screen_radius[i])
                .collect(),
        };
        out
    }

    /// Renormalize every quaternion to unit length.
    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = q.norm();
            if n > 0.0 {
                *q /= n;
            } else {
                *q = Vector4::new(1.0, 0.0, 0.0, 0.0);
            }
        }
    }

    /// Round every parameter to the nearest `f32`, the precision used on
    /// disk.
    pub fn quantize_f32(&mut self) {
        let q = |v: &mut f64| *v = *v as f32 as f64;
        self.positions.iter_mut().flat_map(|p| p.iter_mut()).for_each(q);
        self.log_scales.iter_mut().flat_map(|p| p.iter_mut()).for_each(q);
        self.rotations.iter_mut().flat_map(|p| p.iter_mut()).for_each(q);
        self.opacity_logits.iter_mut().for_each(q);
        self.color_coeffs.iter_mut().flat_map(|p| p.iter_mut()).for_each(q);
    }

    /// Checks the structural invariants: equal array lengths, finite
    /// parameters.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.len();
        let k = self.coeffs_per_gaussian();
        if self.log_scales.len() != n
            || self.rotations.len() != n
            || self.opacity_logits.len() != n
            || self.color_coeffs.len() != n * k
            || self.ledger.len() != n
        {
            return Err("per-gaussian arrays differ in length".into());
        }
        for i in 0..n {
            let s = self.scales(i);
            if !s.iter().all(|v| v.is_finite() && *v > 0.0) {
                return Err(format!("gaussian {i}: scale not positive and finite"));
            }
            if !self.positions[i].iter().all(|v| v.is_finite()) {
                return Err(format!("gaussian {i}: non-finite position"));
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn rotation_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let q = q / q.norm();
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn covariance_from(rotation: &Vector4<f64>, log_scale: &Vector3<f64>) -> Matrix3<f64> {
    let m = rotation_matrix(rotation) * Matrix3::from_diagonal(&log_scale.map(f64::exp));
    m * m.transpose()
}

/// Backpropagates `d_cov` (gradient w.r.t. each entry of the covariance,
/// treated as independent) into the log-scales and the raw quaternion.
pub(crate) fn covariance_backward(
    rotation: &Vector4<f64>,
    log_scale: &Vector3<f64>,
    d_cov: &Matrix3<f64>,
) -> (Vector3<f64>, Vector4<f64>) {
    let scales = log_scale.map(f64::exp);
    let r = rotation_matrix(rotation);
    let m = r * Matrix3::from_diagonal(&scales);
    let d_m = (d_cov + d_cov.transpose()) * m;

    let mut d_log_scale = Vector3::zeros();
    let mut d_r = Matrix3::zeros();
    for k in 0..3 {
        let mut ds = 0.0;
        for i in 0..3 {
            ds += d_m[(i, k)] * r[(i, k)];
            d_r[(i, k)] = d_m[(i, k)] * scales[k];
        }
        d_log_scale[k] = ds * scales[k];
    }

    let norm = rotation.norm();
    let q = rotation / norm;
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let g = |i: usize, j: usize| d_r[(i, j)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let d_qhat = Vector4::new(dw, dx, dy, dz);
    let d_q = (d_qhat - q * q.dot(&d_qhat)) / norm;
    (d_log_scale, d_q)
}
