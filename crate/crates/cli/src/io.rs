//! Image and mask files.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cloudseg_core::image::RgbImage;
use cloudseg_core::mask::BinaryMask;

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .with_context(|| format!("reading image {}", path.display()))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage::new(h as usize, w as usize, img.into_raw())?)
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .expect("buffer size matches dimensions")
        .save(path)
        .with_context(|| format!("writing image {}", path.display()))
}

/// Any non-zero gray level counts as foreground.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)
        .with_context(|| format!("reading mask {}", path.display()))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let bits = img.into_raw().into_iter().map(|v| v > 0).collect();
    Ok(BinaryMask::new(h as usize, w as usize, bits)?)
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.dims();
    let raw = mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }).collect();
    image::GrayImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer size matches dimensions")
        .save(path)
        .with_context(|| format!("writing mask {}", path.display()))
}

/// Nearest-neighbor resize for masks, sampling output pixel centers.
pub fn resize_mask(mask: &BinaryMask, h: usize, w: usize) -> BinaryMask {
    let (sh, sw) = mask.dims();
    BinaryMask::from_fn(h, w, |y, x| {
        let sy = (((y as f64 + 0.5) * sh as f64 / h as f64) as usize).min(sh - 1);
        let sx = (((x as f64 + 0.5) * sw as f64 / w as f64) as usize).min(sw - 1);
        mask.get(sy, sx)
    })
}

pub fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && is_image_file(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
