//! Linear RGB images plus PNG and PFM I/O.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f64; 3]) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Image {
        self.map(|p| [p[0] * k, p[1] * k, p[2] * k])
    }

    /// Largest per-channel absolute difference.
    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f64::max)
    }

    /// Nearest-neighbour crop/resample helper for tests and experiments.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Image {
        Image::from_fn(width, height, |x, y| self.get(x0 + x, y0 + y))
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer size matches dimensions");
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Loads an 8-bit image; values are scaled to `[0, 1]` without gamma
    /// conversion.
    pub fn load(path: &Path) -> Result<Image> {
        let img = ::image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Image {
            width: w as usize,
            height: h as usize,
            pixels: img
                .pixels()
                .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
                .collect(),
        })
    }

    /// Color PFM, little endian, rows stored bottom to top.
    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(32 + self.pixels.len() * 12);
        write!(out, "PF\n{} {}\n-1.0\n", self.width, self.height).unwrap();
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                for v in self.get(x, y) {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_pfm(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Image {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "PF" {
            return Err(bad("only color PFM is supported"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
        let scale: f64 = fields[3].parse().map_err(|_| bad("bad scale"))?;
        let data = &bytes[pos.min(bytes.len())..];
        if data.len() != width * height * 12 {
            return Err(bad("pixel data size mismatch"));
        }
        let read = |i: usize| {
            let b = [data[i * 4], data[i * 4 + 1], data[i * 4 + 2], data[i * 4 + 3]];
            if scale < 0.0 {
                f32::from_le_bytes(b) as f64
            } else {
                f32::from_be_bytes(b) as f64
            }
        };
        Ok(Image::from_fn(width, height, |x, y| {
            let base = ((height - 1 - y) * width + x) * 3;
            [read(base), read(base + 1), read(base + 2)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_is_f32_exact() {
        let img = Image::from_fn(5, 3, |x, y| [x as f64 * 0.1, y as f64 * 0.37, -1.25]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pfm");
        img.save_pfm(&p).unwrap();
        let back = Image::load_pfm(&p).unwrap();
        assert_eq!(back.width, 5);
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            for c in 0..3 {
                assert_eq!(a[c] as f32 as f64, b[c]);
            }
        }
    }

    #[test]
    fn png_round_trip_quantizes() {
        let img = Image::from_fn(4, 4, |x, y| [x as f64 / 3.0, y as f64 / 3.0, 0.5]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = Image::load(&p).unwrap();
        assert!(img.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-12);
    }
}
