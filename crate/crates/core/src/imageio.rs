//! Reading and writing RGB images as row-major `f64` buffers in `[0, 1]`.

use std::path::Path;

use image::imageops::FilterType;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `H x W x 3`.
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "image not found"),
            ));
        }
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    /// Loads and resamples to `width x height` with a Lanczos filter.
    pub fn load_resized(path: &Path, width: usize, height: usize) -> Result<Self> {
        let img = Self::load(path)?;
        Ok(img.resized(width, height))
    }

    fn from_rgb8(img: &image::RgbImage) -> Self {
        RgbImage {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size checked")
    }

    pub fn resized(&self, width: usize, height: usize) -> Self {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let out = image::imageops::resize(&self.to_rgb8(), width as u32, height as u32, FilterType::Lanczos3);
        Self::from_rgb8(&out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_rgb8().save(path)?;
        Ok(())
    }
}

/// Min/max over strictly positive depth values.
pub fn depth_range(depth: &[f64]) -> Option<(f64, f64)> {
    depth
        .iter()
        .filter(|d| **d > 0.0 && d.is_finite())
        .fold(None, |acc, &d| match acc {
            None => Some((d, d)),
            Some((lo, hi)) => Some((lo.min(d), hi.max(d))),
        })
}

/// Grayscale heatmap: near is bright, far is dark, empty pixels black.
pub fn save_depth_heatmap(depth: &[f64], width: usize, height: usize, path: &Path) -> Result<()> {
    if depth.len() != width * height {
        return Err(Error::Shape("depth buffer size".into()));
    }
    let (lo, hi) = depth_range(depth).unwrap_or((0.0, 1.0));
    let span = (hi - lo).max(1e-12);
    let img = image::GrayImage::from_fn(width as u32, height as u32, |x, y| {
        let d = depth[y as usize * width + x as usize];
        let v = if d > 0.0 && d.is_finite() {
            (255.0 * (1.0 - 0.8 * (d - lo) / span)).round() as u8
        } else {
            0
        };
        image::Luma([v])
    });
    img.save(path)?;
    Ok(())
}
