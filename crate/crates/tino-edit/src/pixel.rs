//! RGB pixel images with values in [0, 1] and PNG I/O.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::autodiff::Tensor;
use crate::error::{Result, TinoError};

/// An RGB image stored channel-major as `(3, height, width)` with values in
/// [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    data: Tensor,
}

impl PixelImage {
    pub fn new(data: Tensor) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(TinoError::ShapeMismatch(format!(
                "pixel image must be (3, height, width), got {shape:?}"
            )));
        }
        if !data.is_all_finite() {
            return Err(TinoError::NonFinite("pixel image".into()));
        }
        Ok(PixelImage { data })
    }

    /// Build from a per-pixel function returning (r, g, b).
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut data = vec![0.0; 3 * height * width];
        for y in 0..height {
            for x in 0..width {
                let rgb = f(y, x);
                for (c, v) in rgb.iter().enumerate() {
                    data[c * height * width + y * width + x] = *v;
                }
            }
        }
        PixelImage {
            data: Tensor::new(vec![3, height, width], data).expect("consistent dims"),
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let plane = self.height() * self.width();
        let idx = y * self.width() + x;
        [
            self.data.data()[idx],
            self.data.data()[plane + idx],
            self.data.data()[2 * plane + idx],
        ]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let plane = self.height() * self.width();
        let idx = y * self.width() + x;
        self.data.data_mut()[idx] = rgb[0];
        self.data.data_mut()[plane + idx] = rgb[1];
        self.data.data_mut()[2 * plane + idx] = rgb[2];
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref()).map_err(TinoError::Image)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            let idx = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * h * w + idx] = px.0[c] as f64 / 255.0;
            }
        }
        PixelImage::new(Tensor::new(vec![3, h, w], data)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut img = ImageBuffer::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let rgb = self.pixel(y, x);
                let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel(x as u32, y as u32, Rgb([to_u8(rgb[0]), to_u8(rgb[1]), to_u8(rgb[2])]));
            }
        }
        img.save(path.as_ref()).map_err(TinoError::Image)
    }

    /// Largest per-channel absolute difference between two images.
    pub fn max_abs_diff(&self, other: &PixelImage) -> Result<f64> {
        if self.data.shape() != other.data.shape() {
            return Err(TinoError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.data.shape(),
                other.data.shape()
            )));
        }
        Ok(self
            .data
            .data()
            .iter()
            .zip(other.data.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_preserves_quantized_values() {
        let img = PixelImage::from_fn(8, 8, |y, x| {
            [(y as f64) / 7.0, (x as f64) / 7.0, ((y + x) % 2) as f64]
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        img.save(&path).unwrap();
        let back = PixelImage::load(&path).unwrap();
        // one quantization step of tolerance
        assert!(img.max_abs_diff(&back).unwrap() <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn pixel_accessors_roundtrip() {
        let mut img = PixelImage::filled(4, 4, [0.0, 0.0, 0.0]);
        img.set_pixel(1, 2, [0.25, 0.5, 0.75]);
        assert_eq!(img.pixel(1, 2), [0.25, 0.5, 0.75]);
        assert_eq!(img.pixel(0, 0), [0.0, 0.0, 0.0]);
    }
}
