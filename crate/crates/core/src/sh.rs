//! Real spherical-harmonics basis up to degree 3.
//!
//! Basis order and signs follow the layout used by existing splat files:
//! index `l*l + l + m`, Condon-Shortley phase folded into the constants.

use nalgebra::Vector3;

pub const MAX_DEGREE: usize = 3;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Degree-0 basis constant.
pub const Y00: f64 = C0;

/// Number of coefficients per channel for `degree`.
pub fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Basis values at `dir` (assumed unit length) for all 16 functions; only the
/// first `coeff_count(degree)` entries are meaningful to callers.
pub fn basis(dir: &Vector3<f64>) -> [f64; 16] {
    basis_with_grad(dir).0
}

/// Basis values and their gradients with respect to the (unnormalized)
/// direction components.
pub fn basis_with_grad(dir: &Vector3<f64>) -> ([f64; 16], [[f64; 3]; 16]) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let mut v = [0.0; 16];
    let mut g = [[0.0; 3]; 16];

    v[0] = C0;

    v[1] = -C1 * y;
    g[1] = [0.0, -C1, 0.0];
    v[2] = C1 * z;
    g[2] = [0.0, 0.0, C1];
    v[3] = -C1 * x;
    g[3] = [-C1, 0.0, 0.0];

    v[4] = C2[0] * x * y;
    g[4] = [C2[0] * y, C2[0] * x, 0.0];
    v[5] = C2[1] * y * z;
    g[5] = [0.0, C2[1] * z, C2[1] * y];
    v[6] = C2[2] * (2.0 * zz - xx - yy);
    g[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
    v[7] = C2[3] * x * z;
    g[7] = [C2[3] * z, 0.0, C2[3] * x];
    v[8] = C2[4] * (xx - yy);
    g[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];

    v[9] = C3[0] * y * (3.0 * xx - yy);
    g[9] = [6.0 * C3[0] * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
    v[10] = C3[1] * x * y * z;
    g[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
    v[11] = C3[2] * y * (4.0 * zz - xx - yy);
    g[11] = [
        -2.0 * C3[2] * x * y,
        C3[2] * (4.0 * zz - xx - 3.0 * yy),
        8.0 * C3[2] * y * z,
    ];
    v[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    g[12] = [
        -6.0 * C3[3] * x * z,
        -6.0 * C3[3] * y * z,
        C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
    ];
    v[13] = C3[4] * x * (4.0 * zz - xx - yy);
    g[13] = [
        C3[4] * (4.0 * zz - 3.0 * xx - yy),
        -2.0 * C3[4] * x * y,
        8.0 * C3[4] * x * z,
    ];
    v[14] = C3[5] * z * (xx - yy);
    g[14] = [2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)];
    v[15] = C3[6] * x * (xx - 3.0 * yy);
    g[15] = [C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * x * y, 0.0];

    (v, g)
}

/// Decoded color: basis contraction per channel, offset by 0.5 and clamped
/// at zero from below.
pub fn eval_color(coeffs: &[[f64; 3]], dir: &Vector3<f64>, degree: usize) -> [f64; 3] {
    let raw = eval_raw(coeffs, dir, degree);
    [
        (raw[0] + 0.5).max(0.0),
        (raw[1] + 0.5).max(0.0),
        (raw[2] + 0.5).max(0.0),
    ]
}

/// Contraction before the offset and clamp.
pub fn eval_raw(coeffs: &[[f64; 3]], dir: &Vector3<f64>, degree: usize) -> [f64; 3] {
    let k = coeff_count(degree.min(MAX_DEGREE));
    debug_assert!(coeffs.len() >= k);
    let b = basis(dir);
    let mut out = [0.0; 3];
    for (c, y) in coeffs.iter().zip(b.iter()).take(k) {
        for ch in 0..3 {
            out[ch] += c[ch] * y;
        }
    }
    out
}

/// Coefficient that decodes to `value` at degree 0.
pub fn dc_from_color(value: f64) -> f64 {
    (value - 0.5) / C0
}
