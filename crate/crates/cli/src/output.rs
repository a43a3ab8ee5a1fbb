use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use ndarray::{Array2, Array3, Dimension};
use ndarray_npy::WritableElement;
use serde::Serialize;
use tesr_core::sits::Raster;

/// `<outdir>/{config.resolved.json, checkpoints/, reports/, figures/}`.
pub struct OutDir {
    pub root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        for sub in ["checkpoints", "reports", "figures"] {
            fs::create_dir_all(root.join(sub))
                .with_context(|| format!("creating {}", root.join(sub).display()))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn write_resolved<T: Serialize>(&self, config: &T) -> anyhow::Result<()> {
        write_json(&self.root.join("config.resolved.json"), config)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn write_npy<A: WritableElement, D: Dimension>(path: &Path, array: &ndarray::Array<A, D>) -> anyhow::Result<()> {
    ndarray_npy::write_npy(path, array).with_context(|| format!("writing {}", path.display()))
}

/// 8-bit RGB PNG of the first three channels on the byte scale.
pub fn write_png(path: &Path, raster: &Raster) -> anyhow::Result<()> {
    let bytes = raster.to_byte_scale();
    let data: &Array3<f32> = bytes.data();
    let (c, h, w) = data.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = |ch: usize| data[[ch.min(c - 1), y as usize, x as usize]].round() as u8;
        *px = image::Rgb([v(0), v(1), v(2)]);
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Grayscale PNG of a map, stretched so `max` becomes white.
pub fn write_gray_png(path: &Path, map: &Array2<f32>, max: f32) -> anyhow::Result<()> {
    let (h, w) = map.dim();
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(map[[y as usize, x as usize]] * scale).clamp(0.0, 255.0).round() as u8])
    });
    img.save(path).with_context(|| format!("writing {}", path.display()))
}
