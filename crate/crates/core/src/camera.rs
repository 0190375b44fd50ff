//! Pinhole cameras and the JSON camera-list format.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NEAR: f64 = 0.2;

/// Camera looking down +z, x to the right and y down in the image.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub world_to_camera: Matrix4<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

impl Camera {
    pub fn new(
        world_to_camera: Matrix4<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            world_to_camera,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near: DEFAULT_NEAR,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the world direction that
    /// should appear towards the top of the image.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_x: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let fx = width as f64 / (2.0 * (fov_x / 2.0).tan());
        Self::new(m, fx, fx, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::InvalidCamera(format!(
                "rotation block not orthonormal (error {err:.2e})"
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("image size must be at least 1x1".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }
}

/// Entry of the camera JSON file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: u32,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4x4.
    pub world_to_camera: Vec<f64>,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
}

impl CameraRecord {
    pub fn to_camera(&self) -> Result<Camera> {
        if self.world_to_camera.len() != 16 {
            return Err(Error::InvalidCamera(format!(
                "camera {}: world_to_camera needs 16 numbers, got {}",
                self.id,
                self.world_to_camera.len()
            )));
        }
        let m = Matrix4::from_row_slice(&self.world_to_camera);
        let mut cam = Camera::new(m, self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            .map_err(|e| Error::InvalidCamera(format!("camera {}: {e}", self.id)))?;
        if let Some(near) = self.near {
            cam.near = near;
        }
        Ok(cam)
    }

    pub fn from_camera(id: u32, cam: &Camera, image_path: impl Into<String>) -> Self {
        let mut world_to_camera = Vec::with_capacity(16);
        for r in 0..4 {
            for c in 0..4 {
                world_to_camera.push(cam.world_to_camera[(r, c)]);
            }
        }
        Self {
            id,
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            world_to_camera,
            image_path: image_path.into(),
            near: None,
        }
    }
}

/// Reads a camera list; relative image paths are resolved against the JSON
/// file's directory.
pub fn load_cameras(path: &Path) -> Result<Vec<(Camera, PathBuf)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<CameraRecord> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    records
        .iter()
        .map(|r| {
            let p = PathBuf::from(&r.image_path);
            let p = if p.is_relative() { base.join(p) } else { p };
            Ok((r.to_camera()?, p))
        })
        .collect()
}

pub fn save_cameras(path: &Path, records: &[CameraRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Radius of the sphere around the camera centers, padded by 10%; falls back
/// to 1 for a single camera.
pub fn scene_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centers: Vec<_> = cameras.iter().map(Camera::center).collect();
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}
