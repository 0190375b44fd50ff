//! Binary little-endian PLY in the layout used by 3D Gaussian Splatting
//! viewers:
//!
//! `x y z nx ny nz f_dc_0..2 f_rest_* opacity scale_0..2 rot_0..3`
//!
//! `f_rest` is channel-major: entry `c * (K - 1) + (k - 1)` holds channel
//! `c` of basis function `k`. Opacity is stored as a logit, scales as logs,
//! rotations as `(w, x, y, z)`.

use std::io::Write;
use std::path::Path;

use nalgebra::{Vector3, Vector4};

use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::sh;

/// Property names in file order for a given SH degree.
pub fn attribute_names(sh_degree: usize) -> Vec<String> {
    let rest = 3 * (sh::coeff_count(sh_degree) - 1);
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..rest).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

pub fn to_bytes(cloud: &GaussianCloud) -> Vec<u8> {
    let names = attribute_names(cloud.sh_degree);
    let k = cloud.coeffs_per_gaussian();
    let mut out = Vec::with_capacity(256 + cloud.len() * names.len() * 4);
    write!(out, "ply\nformat binary_little_endian 1.0\nelement vertex {}\n", cloud.len()).unwrap();
    for n in &names {
        writeln!(out, "property float {n}").unwrap();
    }
    out.extend_from_slice(b"end_header\n");
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let coeffs = cloud.coeffs(i);
        p.iter().for_each(|&v| put(v));
        (0..3).for_each(|_| put(0.0));
        coeffs[0].iter().for_each(|&v| put(v));
        for c in 0..3 {
            for coeff in &coeffs[1..k] {
                put(coeff[c]);
            }
        }
        put(cloud.opacity_logits[i]);
        cloud.log_scales[i].iter().for_each(|&v| put(v));
        cloud.rotations[i].iter().for_each(|&v| put(v));
    }
    out
}

pub fn save(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(cloud)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, PartialEq)]
enum Scalar {
    F32,
    F64,
    U8,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "float" | "float32" => Some(Scalar::F32),
            "double" | "float64" => Some(Scalar::F64),
            "uchar" | "uint8" => Some(Scalar::U8),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Scalar::F32 => 4,
            Scalar::F64 => 8,
            Scalar::U8 => 1,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
            Scalar::U8 => b[0] as f64,
        }
    }
}

/// Parses a cloud. When `expected_degree` is given, a file whose `f_rest`
/// count implies a different degree is rejected.
pub fn from_bytes(bytes: &[u8], expected_degree: Option<usize>) -> Result<GaussianCloud> {
    let bad = |m: String| Error::MalformedPly(m);
    let end = find(bytes, b"end_header\n").ok_or_else(|| bad("missing end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not utf-8".into()))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing ply magic".into()));
    }
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    let mut format_ok = false;
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", "binary_little_endian", _] => format_ok = true,
            ["format", other, ..] => return Err(bad(format!("unsupported format {other}"))),
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(bad("duplicate vertex element".into()));
                }
                count = Some(n.parse::<usize>().map_err(|_| bad(format!("bad vertex count {n}")))?);
                in_vertex = true;
            }
            ["element", name, _] => {
                if count.is_none() {
                    return Err(bad(format!("element {name} before vertex")));
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => return Err(bad("list property in vertex".into())),
            ["property", ty, name] if in_vertex => {
                let t = Scalar::parse(ty).ok_or_else(|| bad(format!("unsupported type {ty}")))?;
                props.push((name.to_string(), t));
            }
            ["comment", ..] | ["obj_info", ..] | ["property", ..] | [] => {}
            _ => return Err(bad(format!("unrecognized header line {line:?}"))),
        }
    }
    if !format_ok {
        return Err(bad("missing format line".into()));
    }
    let n = count.ok_or_else(|| bad("no vertex element".into()))?;

    let rest = props.iter().filter(|(p, _)| p.starts_with("f_rest_")).count();
    let degree = (0..=sh::MAX_DEGREE)
        .find(|&d| 3 * (sh::coeff_count(d) - 1) == rest)
        .ok_or_else(|| Error::AttributeMismatch(format!("{rest} f_rest properties match no SH degree")))?;
    if let Some(d) = expected_degree {
        if d != degree {
            return Err(Error::AttributeMismatch(format!(
                "file carries degree {degree} color ({rest} f_rest values), expected degree {d}"
            )));
        }
    }
    let mut offsets = Vec::with_capacity(props.len());
    let mut stride = 0;
    for (_, t) in &props {
        offsets.push(stride);
        stride += t.size();
    }
    let col = |name: &str| -> Result<(usize, Scalar)> {
        props
            .iter()
            .position(|(p, _)| p == name)
            .map(|i| (offsets[i], props[i].1))
            .ok_or_else(|| Error::AttributeMismatch(format!("missing property {name}")))
    };
    let names = attribute_names(degree);
    let cols: Vec<(usize, Scalar)> = names
        .iter()
        .filter(|n| !n.starts_with('n'))
        .map(|n| col(n))
        .collect::<Result<_>>()?;

    let body = &bytes[end + b"end_header\n".len()..];
    let need = n.checked_mul(stride).ok_or_else(|| bad("vertex data size overflows".into()))?;
    if body.len() < need {
        return Err(bad(format!("truncated: {} vertex bytes, expected {need}", body.len())));
    }

    let k = sh::coeff_count(degree);
    let mut cloud = GaussianCloud::new(degree);
    cloud.positions.reserve(n);
    cloud.color_coeffs.reserve(n * k);
    for v in 0..n {
        let rec = &body[v * stride..(v + 1) * stride];
        let vals: Vec<f64> = cols.iter().map(|&(o, t)| t.read(&rec[o..])).collect();
        cloud.positions.push(Vector3::new(vals[0], vals[1], vals[2]));
        let mut coeffs = vec![[0.0; 3]; k];
        coeffs[0] = [vals[3], vals[4], vals[5]];
        for c in 0..3 {
            for (kk, coeff) in coeffs.iter_mut().enumerate().skip(1) {
                coeff[c] = vals[6 + c * (k - 1) + kk - 1];
            }
        }
        let b = 6 + 3 * (k - 1);
        cloud.opacity_logits.push(vals[b]);
        cloud.log_scales.push(Vector3::new(vals[b + 1], vals[b + 2], vals[b + 3]));
        cloud.rotations.push(Vector4::new(vals[b + 4], vals[b + 5], vals[b + 6], vals[b + 7]));
        cloud.color_coeffs.extend_from_slice(&coeffs);
    }
    cloud.reset_ledger();
    Ok(cloud)
}

pub fn load(path: &Path, expected_degree: Option<usize>) -> Result<GaussianCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, expected_degree)
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}
