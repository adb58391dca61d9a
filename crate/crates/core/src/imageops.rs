//! Minimal planar RGB image type shared by the data, sampling and
//! evaluation paths.

use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::layout::{rasterize_box, BBox, BinaryMask};

/// Planar (CHW) RGB image with `f32` channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Image::new(height, width);
        for r in 0..height {
            for c in 0..width {
                img.set(r, c, f(r, c));
            }
        }
        img
    }

    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::shape("Image", 3 * height * width, data.len()));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn planar(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> [f32; 3] {
        let p = self.height * self.width;
        let i = row * self.width + col;
        [self.data[i], self.data[p + i], self.data[2 * p + i]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let p = self.height * self.width;
        let i = row * self.width + col;
        self.data[i] = rgb[0];
        self.data[p + i] = rgb[1];
        self.data[2 * p + i] = rgb[2];
    }

    /// Pixels whose centers fall inside `bbox`; `None` when that set is empty.
    pub fn crop(&self, bbox: &BBox) -> Option<Image> {
        let mask = rasterize_box(bbox, self.dims());
        let b = mask.bounding_box()?;
        let c0 = (b.x0 * self.width as f64).round() as usize;
        let r0 = (b.y0 * self.height as f64).round() as usize;
        let c1 = (b.x1 * self.width as f64).round() as usize;
        let r1 = (b.y1 * self.height as f64).round() as usize;
        Some(Image::from_fn(r1 - r0, c1 - c0, |r, c| self.get(r0 + r, c0 + c)))
    }

    /// Bilinear resample with half-pixel centers.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Image::from_fn(height, width, |r, c| {
            let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
            let (wy, wx) = ((fy - y0 as f64) as f32, (fx - x0 as f64) as f32);
            let (a, b, c2, d) = (self.get(y0, x0), self.get(y0, x1), self.get(y1, x0), self.get(y1, x1));
            std::array::from_fn(|k| {
                let top = a[k] * (1.0 - wx) + b[k] * wx;
                let bot = c2[k] * (1.0 - wx) + d[k] * wx;
                top * (1.0 - wy) + bot * wy
            })
        })
    }

    /// Aspect-preserving resize into a `size x size` canvas, centered and
    /// padded with `pad`.
    pub fn resize_padded(&self, size: usize, pad: [f32; 3]) -> Image {
        let scale = size as f64 / self.height.max(self.width) as f64;
        let h = ((self.height as f64 * scale).round() as usize).clamp(1, size);
        let w = ((self.width as f64 * scale).round() as usize).clamp(1, size);
        let inner = self.resize_bilinear(h, w);
        let (oy, ox) = ((size - h) / 2, (size - w) / 2);
        let mut out = Image::filled(size, size, pad);
        for r in 0..h {
            for c in 0..w {
                out.set(oy + r, ox + c, inner.get(r, c));
            }
        }
        out
    }

    /// Copies `self` where `mask` is set and `background` elsewhere. Values
    /// outside the mask are bit-identical to `background`.
    pub fn composite_over(&self, background: &Image, mask: &BinaryMask) -> Image {
        assert_eq!(self.dims(), background.dims());
        assert_eq!(self.dims(), mask.dims());
        let mut out = background.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                if mask.get(r, c) {
                    out.set(r, c, self.get(r, c));
                }
            }
        }
        out
    }

    /// Zeroes every pixel inside `mask`.
    pub fn zero_inside(&self, mask: &BinaryMask) -> Image {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                if mask.get(r, c) {
                    out.set(r, c, [0.0; 3]);
                }
            }
        }
        out
    }

    /// `(3, H, W)` tensor with values mapped to `[-1, 1]`.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.data.iter().map(|x| x * 2.0 - 1.0).collect();
        Ok(Tensor::from_vec(v, (3, self.height, self.width), device)?)
    }

    /// Inverse of [`Image::to_tensor`], clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::shape("Image::from_tensor", "3 channels", c));
        }
        let v = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let data = v.iter().map(|x| ((x + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
        Image::from_planar(h, w, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = self.get(y as usize, x as usize);
            image::Rgb(px.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        let (w, h) = img.dimensions();
        Image::from_fn(h as usize, w as usize, |r, c| {
            img.get_pixel(c as u32, r as u32).0.map(|v| v as f32 / 255.0)
        })
    }

    /// Re-quantizes to 8 bits per channel, matching a PNG round trip.
    pub fn quantized(&self) -> Image {
        Image::from_rgb8(&self.to_rgb8())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }

    /// Mean absolute difference over all channels.
    pub fn mean_abs_diff(&self, other: &Image) -> f32 {
        let n = self.data.len().max(1) as f32;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |r, c| [r as f32 / h as f32, c as f32 / w as f32, 0.5])
    }

    #[test]
    fn crop_follows_pixel_center_rule() {
        let img = ramp(8, 8);
        let crop = img.crop(&BBox::new(0.25, 0.0, 0.75, 0.5)).unwrap();
        assert_eq!(crop.dims(), (4, 4));
        assert_eq!(crop.get(0, 0), img.get(0, 2));
        assert!(img.crop(&BBox::new(0.3, 0.3, 0.31, 0.31)).is_none());
    }

    #[test]
    fn resize_identity_and_padding() {
        let img = ramp(6, 6);
        assert_eq!(img.resize_bilinear(6, 6), img);
        let wide = Image::filled(2, 4, [1.0, 0.0, 0.0]);
        let sq = wide.resize_padded(8, [0.5; 3]);
        assert_eq!(sq.dims(), (8, 8));
        assert_eq!(sq.get(0, 0), [0.5; 3]);
        assert_eq!(sq.get(4, 4), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn tensor_round_trip() {
        let img = ramp(4, 5);
        let t = img.to_tensor(&Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[3, 4, 5]);
        let back = Image::from_tensor(&t).unwrap();
        assert!(back.mean_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn composite_keeps_background_bits() {
        let bg = ramp(4, 4);
        let fg = Image::filled(4, 4, [0.9, 0.1, 0.3]);
        let mask = BinaryMask::from_fn(4, 4, |r, _| r < 2);
        let out = fg.composite_over(&bg, &mask);
        for r in 0..4 {
            for c in 0..4 {
                let expect = if r < 2 { fg.get(r, c) } else { bg.get(r, c) };
                assert_eq!(out.get(r, c), expect);
            }
        }
    }
}
