//! Deterministic gradient-histogram features.
//!
//! Each `factor x factor` cell yields a magnitude-weighted histogram of signed
//! gradient directions plus its centred mean intensity. Histograms are
//! contrast-normalised per cell, so textured windows carry comparable energy.
//! No training needed, so the alignment and sequencing stages can be
//! exercised on their own.

use super::{normalize, FeatureExtractor, FeatureMap};
use crate::geometry::PolarImage;
use crate::image::Image;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

/// How horizontal gradients treat the first and last columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnEdges {
    /// Columns wrap; for full 360 deg panoramas and polar references.
    Circular,
    /// Columns clamp; for limited field-of-view views.
    Clamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HandcraftedExtractor {
    /// Cell side in pixels, also the width downsample factor.
    pub factor: usize,
    pub orientation_bins: usize,
    /// Multiplier applied to the centred mean-intensity channel.
    pub intensity_weight: f64,
    /// Regulariser of the per-cell histogram norm, in mean gradient units.
    pub cell_epsilon: f64,
}

impl Default for HandcraftedExtractor {
    fn default() -> Self {
        Self {
            factor: 4,
            orientation_bins: 8,
            intensity_weight: 1.0,
            cell_epsilon: 0.02,
        }
    }
}

impl HandcraftedExtractor {
    pub fn channels(&self) -> usize {
        self.orientation_bins + 1
    }

    /// Raw (unnormalised) features of `image`.
    pub fn extract(&self, image: &Image, edges: ColumnEdges) -> Result<FeatureMap> {
        let f = self.factor;
        let (w, h) = (image.width(), image.height());
        if f == 0 || w % f != 0 || h % f != 0 {
            return Err(Error::BadDimensions(format!(
                "{w}x{h} image is not divisible by cell size {f}"
            )));
        }
        let bins = self.orientation_bins;
        let (fw, fh) = (w / f, h / f);
        let mut out = FeatureMap::zeros(fw, fh, bins + 1);
        let cell_area = (f * f) as f64;
        let wi = w as isize;
        let column = |x: isize| match edges {
            ColumnEdges::Circular => x.rem_euclid(wi) as usize,
            ColumnEdges::Clamp => x.clamp(0, wi - 1) as usize,
        };
        let left: Vec<usize> = (0..wi).map(|x| column(x - 1)).collect();
        let right: Vec<usize> = (0..wi).map(|x| column(x + 1)).collect();
        // bin k starts at angle k TAU / bins; within a half-plane the angle is
        // monotone in its cosine, so bins are found by comparing cosines
        let starts: Vec<f64> = (1..bins).map(|k| k as f64 * TAU / bins as f64).collect();
        let upper: Vec<f64> = starts.iter().filter(|&&a| a <= PI).map(|a| a.cos()).collect();
        let lower: Vec<f64> = starts.iter().filter(|&&a| a > PI).map(|a| a.cos()).collect();
        let data = image.data();
        let row = |y: usize| &data[y * w..(y + 1) * w];
        for y in 0..h {
            let (above, here, below) = (row(y.saturating_sub(1)), row(y), row((y + 1).min(h - 1)));
            let cy = y / f;
            for x in 0..w {
                let gx = here[right[x]] as f64 - here[left[x]] as f64;
                // image rows grow downward; flip so angles are counter-clockwise
                let gy = above[x] as f64 - below[x] as f64;
                let mag = (gx * gx + gy * gy).sqrt();
                let cx = x / f;
                if mag > 0.0 {
                    let c = gx / mag;
                    let bin = if gy >= 0.0 {
                        upper.iter().filter(|&&b| b >= c).count()
                    } else {
                        upper.len() + lower.iter().filter(|&&b| b <= c).count()
                    };
                    let i = out.index(cx, cy, bin);
                    out.data_mut()[i] += mag / cell_area;
                }
                let i = out.index(cx, cy, bins);
                out.data_mut()[i] += (here[x] as f64 - 0.5) * self.intensity_weight / cell_area;
            }
        }
        for cy in 0..fh {
            for cx in 0..fw {
                let sq: f64 = (0..bins).map(|k| out.get(cx, cy, k).powi(2)).sum();
                let scale = 1.0 / (sq + self.cell_epsilon * self.cell_epsilon).sqrt();
                for k in 0..bins {
                    let v = out.get(cx, cy, k);
                    out.set(cx, cy, k, v * scale);
                }
            }
        }
        Ok(out)
    }
}

impl FeatureExtractor for HandcraftedExtractor {
    fn ground_features(&self, image: &Image) -> Result<FeatureMap> {
        // trailing columns that do not fill a cell are dropped
        let usable = image.width() / self.factor * self.factor;
        if usable == 0 {
            return Err(Error::BadDimensions(format!(
                "ground view of {} columns is narrower than one cell",
                image.width()
            )));
        }
        let raw = if usable == image.width() {
            self.extract(image, ColumnEdges::Clamp)?
        } else {
            self.extract(&image.column_window(0, usable)?, ColumnEdges::Clamp)?
        };
        normalize(&raw)
    }

    fn reference_features(&self, polar: &PolarImage) -> Result<FeatureMap> {
        normalize(&self.extract(&polar.pixels, ColumnEdges::Circular)?)
    }

    fn downsample(&self) -> usize {
        self.factor
    }
}
