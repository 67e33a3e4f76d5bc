//! RGB images in `[0, 1]` and their 8-bit view.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// An `H × W × 3` image with values in `[0, 1]`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T> {
    pub pixels: Tensor<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(pixels: Tensor<T>) -> Result<Self> {
        if pixels.channels != 3 {
            return Err(Error::Shape(format!("image needs 3 channels, got {}", pixels.channels)));
        }
        if pixels.data.iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(Error::Contract("image values must lie in [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    /// Builds an image from interleaved 8-bit RGB.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {} bytes for {height}x{width} RGB, got {}",
                height * width * 3,
                rgb.len()
            )));
        }
        let mut t = Tensor::zeros(3, height, width);
        let scale = T::lit(1.0 / 255.0);
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                t.data[c * height * width + i] = T::lit(px[c] as f64) * scale;
            }
        }
        Ok(Self { pixels: t })
    }

    pub fn height(&self) -> usize {
        self.pixels.height
    }

    pub fn width(&self) -> usize {
        self.pixels.width
    }

    /// Interleaved 8-bit RGB, `round(clamp(v)·255)`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.pixels.plane();
        let mut out = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for c in 0..3 {
                out.push(quantize_8bit(self.pixels.data[c * plane + i]));
            }
        }
        out
    }

    /// Replicate-pads bottom and right edges up to multiples of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> Self {
        let h = self.height().div_ceil(multiple) * multiple;
        let w = self.width().div_ceil(multiple) * multiple;
        if h == self.height() && w == self.width() {
            return self.clone();
        }
        let mut t = Tensor::zeros(3, h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    t.data[(c * h + y) * w + x] =
                        self.pixels.at(c, y.min(self.height() - 1), x.min(self.width() - 1));
                }
            }
        }
        Self { pixels: t }
    }

    /// Keeps the top-left `height × width` region.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height() || width > self.width() {
            return Err(Error::Shape(format!(
                "crop {height}x{width} exceeds image {}x{}",
                self.height(),
                self.width()
            )));
        }
        let mut t = Tensor::zeros(3, height, width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    t.data[(c * height + y) * width + x] = self.pixels.at(c, y, x);
                }
            }
        }
        Ok(Self { pixels: t })
    }

    /// Extracts a `size × size` window at `(top, left)`.
    pub fn window(&self, top: usize, left: usize, size: usize) -> Self {
        let mut t = Tensor::zeros(3, size, size);
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    t.data[(c * size + y) * size + x] = self.pixels.at(c, top + y, left + x);
                }
            }
        }
        Self { pixels: t }
    }

    pub fn cast<U: Scalar>(&self) -> ImageTensor<U> {
        ImageTensor {
            pixels: Tensor::from_vec(
                3,
                self.height(),
                self.width(),
                self.pixels.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            ),
        }
    }
}

#[inline]
pub fn quantize_8bit<T: Scalar>(v: T) -> u8 {
    let v = v.as_f64().clamp(0.0, 1.0);
    (v * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_and_crop_restore_extent() {
        let rgb: Vec<u8> = (0..65 * 63 * 3).map(|i| (i % 251) as u8).collect();
        let img = ImageTensor::<f32>::from_rgb8(65, 63, &rgb).unwrap();
        let padded = img.pad_to_multiple(8);
        assert_eq!((padded.height(), padded.width()), (72, 64));
        // replicated edge
        assert_eq!(padded.pixels.at(1, 71, 63), img.pixels.at(1, 64, 62));
        let back = padded.crop(65, 63).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.to_rgb8(), rgb);
    }

    #[test]
    fn rejects_out_of_range() {
        let t = Tensor::from_vec(3, 1, 1, vec![0.0f64, 1.5, 0.2]);
        assert!(ImageTensor::new(t).is_err());
    }
}
