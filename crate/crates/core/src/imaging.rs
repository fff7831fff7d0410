//! Single-channel float images and the resampling primitives used by the augmentation pipeline.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grayscale image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width} image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn mean_abs_diff(&self, other: &GrayImage) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        let n = self.data.len().max(1) as f64;
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n
    }

    /// Bilinear sample at continuous pixel-center coordinates; `None` outside the image.
    pub fn sample_bilinear(&self, y: f64, x: f64) -> Option<f64> {
        let (h, w) = (self.height as f64, self.width as f64);
        if !(y > -1.0 && y < h && x > -1.0 && x < w) {
            return None;
        }
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let at = |yy: f64, xx: f64| {
            if yy < 0.0 || xx < 0.0 || yy >= h || xx >= w {
                0.0
            } else {
                self.get(yy as usize, xx as usize)
            }
        };
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
        let bottom = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    /// Sub-image with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::ImageTooSmall {
                height: self.height,
                width: self.width,
                min_height: top + height,
                min_width: left + width,
            });
        }
        Ok(Self::from_fn(height, width, |y, x| self.get(top + y, left + x)))
    }

    pub fn center_crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height || width > self.width {
            return Err(Error::ImageTooSmall {
                height: self.height,
                width: self.width,
                min_height: height,
                min_width: width,
            });
        }
        self.crop((self.height - height) / 2, (self.width - width) / 2, height, width)
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let max_y = (self.height - 1) as f64;
        let max_x = (self.width - 1) as f64;
        Self::from_fn(height, width, |y, x| {
            let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let (y0, x0) = (src_y.floor() as usize, src_x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
            let (fy, fx) = (src_y - y0 as f64, src_x - x0 as f64);
            let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
            let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
            (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
        })
    }

    /// Rotation about the image center by `degrees` (counter-clockwise), zero fill outside.
    pub fn rotate(&self, degrees: f64) -> Self {
        if degrees == 0.0 {
            return self.clone();
        }
        let (sin, cos) = degrees.to_radians().sin_cos();
        let cy = (self.height as f64 - 1.0) / 2.0;
        let cx = (self.width as f64 - 1.0) / 2.0;
        Self::from_fn(self.height, self.width, |y, x| {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // inverse rotation maps each output pixel to its source
            let src_x = cos * dx - sin * dy + cx;
            let src_y = sin * dx + cos * dy + cy;
            self.sample_bilinear(src_y, src_x).unwrap_or(0.0).clamp(0.0, 1.0)
        })
    }

    /// Writes an 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let buffer = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        buffer.save(path).map_err(|e| Error::Image { path: path.display().to_string(), message: e.to_string() })
    }

    /// Reads any image format supported by the `image` crate as 8-bit luma.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image { path: path.display().to_string(), message: e.to_string() })?
            .to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Self::new(h as usize, w as usize, data)
    }

    /// Quantizes to 8 bits, matching a PNG round trip.
    pub fn quantized(&self) -> Self {
        self.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
    }
}
