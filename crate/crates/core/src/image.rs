//! Single-channel raster used for aerial tiles, polar images and ground views.

use crate::{Error, Result};

/// Row-major grayscale image, nominal range `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::BadDimensions(format!("{width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::BadDimensions(format!(
                "{} samples for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres on
    /// integers), clamping to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f32 {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(x0, y0) as f64 * (1.0 - fx) + self.get(x1, y0) as f64 * fx;
        let bottom = self.get(x0, y1) as f64 * (1.0 - fx) + self.get(x1, y1) as f64 * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    }

    /// Circularly shifts columns left by `k`: output column `c` is input column `c + k`.
    pub fn roll_columns(&self, k: isize) -> Image {
        let w = self.width as isize;
        Image::from_fn(self.width, self.height, |x, y| {
            self.get((x as isize + k).rem_euclid(w) as usize, y)
        })
    }

    /// Columns `[start, start + width)` with circular wrap.
    pub fn column_window(&self, start: usize, width: usize) -> Result<Image> {
        if width == 0 || width > self.width {
            return Err(Error::BadDimensions(format!(
                "window of {width} columns from a {}-wide image",
                self.width
            )));
        }
        Ok(Image::from_fn(width, self.height, |x, y| {
            self.get((start + x) % self.width, y)
        }))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

#[cfg(feature = "io")]
mod io {
    use super::Image;
    use crate::Result;
    use std::path::Path;

    impl Image {
        /// Loads any supported image file as luminance in `[0, 1]`.
        pub fn load(path: impl AsRef<Path>) -> Result<Image> {
            let img = image::open(path)?.into_luma16();
            let (w, h) = img.dimensions();
            let data = img.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
            Image::new(w as usize, h as usize, data)
        }

        /// Writes a 16-bit grayscale PNG.
        pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
            let raw: Vec<u16> = self
                .data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
                .collect();
            let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
                self.width as u32,
                self.height as u32,
                raw,
            )
            .expect("buffer length matches dimensions");
            buf.save(path)?;
            Ok(())
        }
    }
}
