use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

/// Interleaved 8-bit RGB pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::precondition(format!("image is empty ({height}x{width})")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "{height}x{width} RGB image needs {} bytes, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(RgbImage { height, width, pixels })
    }

    /// Raw pixel values (0..=255) as a `(1, 3, h, w)` tensor.
    pub fn to_raw_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(Dims::new(1, 3, h, w), |_, c, y, x| {
            self.pixels[(y * w + x) * 3 + c] as f32
        })
    }

    /// Pixel values scaled to `[0, 1]`.
    pub fn to_unit_tensor(&self) -> Tensor {
        self.to_raw_tensor().map(|v| v / 255.0)
    }

    /// Inverse of [`RgbImage::to_unit_tensor`] for batch item 0, rounding and
    /// clamping to 8 bits.
    pub fn from_unit_tensor(t: &Tensor) -> Result<Self> {
        let d = t.dims();
        if d.c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {d}")));
        }
        let mut pixels = vec![0u8; d.h * d.w * 3];
        for c in 0..3 {
            for (i, &v) in t.plane(0, c).iter().enumerate() {
                pixels[i * 3 + c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        RgbImage::new(d.h, d.w, pixels)
    }
}
