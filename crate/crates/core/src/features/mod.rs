//! Spatial feature maps and the extractors that produce them.

pub mod handcrafted;
pub mod network;

use crate::geometry::PolarImage;
use crate::image::Image;
use crate::{Error, Result};

pub use handcrafted::{ColumnEdges, HandcraftedExtractor};
pub use network::{Branch, ExtractorParams, LearnedExtractor, NetworkConfig};

/// Dense `(width, height, channels)` feature tensor.
///
/// Width is the orientation axis. Storage is channel-major, then row, then
/// column, so each `(h, k)` row is contiguous along width.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 || data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height}x{channels} feature map",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut m = Self::zeros(width, height, channels);
        for k in 0..channels {
            for h in 0..height {
                for w in 0..width {
                    let i = m.index(w, h, k);
                    m.data[i] = f(w, h, k);
                }
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, w: usize, h: usize, k: usize) -> usize {
        (k * self.height + h) * self.width + w
    }

    #[inline]
    pub fn get(&self, w: usize, h: usize, k: usize) -> f64 {
        self.data[self.index(w, h, k)]
    }

    #[inline]
    pub fn set(&mut self, w: usize, h: usize, k: usize, v: f64) {
        let i = self.index(w, h, k);
        self.data[i] = v;
    }

    /// The contiguous width-axis row for `(h, k)`.
    #[inline]
    pub fn row(&self, h: usize, k: usize) -> &[f64] {
        let start = (k * self.height + h) * self.width;
        &self.data[start..start + self.width]
    }

    #[inline]
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.width)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> FeatureMap {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// Circular shift along width: output column `w` is input column `w + k`.
    pub fn roll_columns(&self, k: isize) -> FeatureMap {
        let wlen = self.width as isize;
        FeatureMap::from_fn(self.width, self.height, self.channels, |w, h, c| {
            self.get((w as isize + k).rem_euclid(wlen) as usize, h, c)
        })
    }

    /// Frobenius distance between equally shaped maps.
    pub fn distance(&self, other: &FeatureMap) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

/// Scales `f` to unit Frobenius norm.
pub fn normalize(f: &FeatureMap) -> Result<FeatureMap> {
    let n = f.frobenius_norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::ZeroFeature);
    }
    Ok(f.scaled(1.0 / n))
}

/// Backward pass of [`normalize`]: maps the gradient w.r.t. the unit-norm
/// output `y = x / |x|` onto the gradient w.r.t. `x`.
pub fn normalize_backward(normalized: &FeatureMap, norm: f64, grad_out: &[f64]) -> Vec<f64> {
    let y = normalized.data();
    let dot: f64 = y.iter().zip(grad_out).map(|(a, b)| a * b).sum();
    y.iter()
        .zip(grad_out)
        .map(|(yi, gi)| (gi - yi * dot) / norm)
        .collect()
}

/// Anything that maps ground images and polar references to unit-norm feature maps
/// sharing height and channel count.
pub trait FeatureExtractor {
    fn ground_features(&self, image: &Image) -> Result<FeatureMap>;
    fn reference_features(&self, polar: &PolarImage) -> Result<FeatureMap>;
    /// Image columns per feature column.
    fn downsample(&self) -> usize;
}
