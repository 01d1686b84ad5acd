//! Joint location and heading search around a crude position prior.
//!
//! Frame 0 is scored against every grid sample; the top `N` survive into a
//! consistency check where each hypothesis is propagated through odometry
//! for `f_d` frames and must stay above a similarity threshold throughout.

use crate::alignment::{sliding_similarity_auto, SimilarityVector};
use crate::angle::rotate_bearing;
use crate::features::{FeatureExtractor, FeatureMap};
use crate::geometry::{GeoPoint, ReferenceSource};
use crate::sequencer::{track_dummy_orientation, FrameObservation};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum SimilarityThreshold {
    /// Fraction of the best frame-0 score over the whole grid.
    RelativeToTop(f64),
    Absolute(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// `[east, north]` extent of the search box in meters.
    pub region_meters: [f64; 2],
    pub sample_spacing: f64,
    pub top_n: usize,
    pub consistency_frames: usize,
    pub threshold: SimilarityThreshold,
    /// Bins either side of the propagated heading searched for each frame's score.
    pub bin_tolerance: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            region_meters: [100.0, 100.0],
            sample_spacing: 2.0,
            top_n: 25,
            consistency_frames: 20,
            threshold: SimilarityThreshold::RelativeToTop(0.7),
            bin_tolerance: 1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_spacing > 0.0) || self.region_meters.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::InvalidConfig("search region and spacing".into()));
        }
        if self.top_n == 0 || self.consistency_frames == 0 {
            return Err(Error::InvalidConfig("top_n and consistency_frames must be positive".into()));
        }
        Ok(())
    }

    fn axis_samples(&self, extent: f64) -> usize {
        (extent / self.sample_spacing + 1e-9).floor() as usize + 1
    }

    /// `(columns, rows)` of the grid.
    pub fn grid_shape(&self) -> (usize, usize) {
        (
            self.axis_samples(self.region_meters[0]),
            self.axis_samples(self.region_meters[1]),
        )
    }
}

/// Regular grid centred on `prior`, row-major from north-west.
pub fn sample_grid(prior: GeoPoint, cfg: &SearchConfig) -> Vec<GeoPoint> {
    let (nx, ny) = cfg.grid_shape();
    let s = cfg.sample_spacing;
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        let north = ((ny - 1) as f64 / 2.0 - j as f64) * s;
        for i in 0..nx {
            let east = (i as f64 - (nx - 1) as f64 / 2.0) * s;
            out.push(prior.offset_by(east, north));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationHypothesis {
    pub location: GeoPoint,
    pub grid_index: usize,
    /// Sum of per-frame scores over the consistency window.
    pub score: f64,
    pub best_bin: usize,
    pub heading_degrees: f64,
    pub consistent: bool,
    pub frame_scores: Vec<f64>,
}

/// Frame-0 score of one grid sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub grid_index: usize,
    pub location: GeoPoint,
    pub score: f64,
    pub best_bin: usize,
    /// 1-based frame-0 rank.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: LocationHypothesis,
    /// Top-`N` survivors after consistency checking, in rank order.
    pub hypotheses: Vec<LocationHypothesis>,
    /// Every scored grid sample, best first.
    pub candidates: Vec<CandidateScore>,
    pub threshold: f64,
}

/// Highest score within `tol` bins of `center`, circularly.
fn windowed_max(s: &SimilarityVector, center: usize, tol: usize) -> f64 {
    let w = s.len() as isize;
    let tol = tol.min(s.len() / 2) as isize;
    (-tol..=tol)
        .map(|d| s.scores[(center as isize + d).rem_euclid(w) as usize])
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Runs the grid search and consistency check over `frames`.
pub fn search(
    frames: &[FrameObservation],
    refs: &ReferenceSource<'_>,
    extractor: &dyn FeatureExtractor,
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if frames.len() < cfg.consistency_frames {
        return Err(Error::InvalidConfig(format!(
            "search needs {} frames, got {}",
            cfg.consistency_frames,
            frames.len()
        )));
    }
    let frames = &frames[..cfg.consistency_frames];
    let grid = sample_grid(frames[0].global_position, cfg);
    let fg0 = extractor.ground_features(&frames[0].image)?;

    let mut candidates = vec![];
    let mut bins = 0;
    for (idx, &p) in grid.iter().enumerate() {
        let polar = match refs.polar_at(p) {
            Ok(polar) => polar,
            Err(Error::OutOfBounds { .. }) => continue,
            Err(e) => return Err(e),
        };
        let s = sliding_similarity_auto(&fg0, &extractor.reference_features(&polar)?)?;
        let best_bin = s.argmax();
        bins = s.len();
        candidates.push(CandidateScore {
            grid_index: idx,
            location: p,
            score: s.scores[best_bin],
            best_bin,
            rank: 0,
        });
    }
    if candidates.is_empty() {
        return Err(Error::NoConsistentHypothesis);
    }
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.grid_index.cmp(&b.grid_index)));
    for (r, c) in candidates.iter_mut().enumerate() {
        c.rank = r + 1;
    }
    let threshold = match cfg.threshold {
        SimilarityThreshold::RelativeToTop(f) => f * candidates[0].score,
        SimilarityThreshold::Absolute(v) => v,
    };

    // odometry is shared by every hypothesis: dummy orientation and
    // cumulative translation in the odometry frame
    let mut track = Vec::with_capacity(frames.len());
    let (mut y, mut pos) = (0.0, [0.0, 0.0]);
    for (i, f) in frames.iter().enumerate() {
        if i > 0 {
            y = track_dummy_orientation(y, f.heading_delta);
            pos = [pos[0] + f.translation[0], pos[1] + f.translation[1]];
        }
        track.push((y, pos));
    }
    let ground: Vec<FeatureMap> = frames
        .iter()
        .map(|f| extractor.ground_features(&f.image))
        .collect::<Result<_>>()?;

    let granularity = 360.0 / bins as f64;
    let mut hypotheses = vec![];
    for c in candidates.iter().take(cfg.top_n) {
        let mut reference: Option<([f64; 2], FeatureMap)> = None;
        let heading = c.best_bin as f64 * granularity;
        let mut frame_scores = Vec::with_capacity(frames.len());
        let mut out_of_bounds = false;
        for (fg, &(y, offset)) in ground.iter().zip(&track) {
            let world_offset = rotate_bearing(offset, heading);
            let fs = match &reference {
                // a stationary user keeps hitting this branch
                Some((at, fs)) if *at == world_offset => fs.clone(),
                _ => {
                    let p = c.location.offset_by(world_offset[0], world_offset[1]);
                    let fs = match refs.polar_at(p) {
                        Ok(polar) => extractor.reference_features(&polar)?,
                        Err(Error::OutOfBounds { .. }) => {
                            out_of_bounds = true;
                            break;
                        }
                        Err(e) => return Err(e),
                    };
                    reference = Some((world_offset, fs.clone()));
                    fs
                }
            };
            let s = sliding_similarity_auto(fg, &fs)?;
            let w = s.len();
            let predicted = (c.best_bin as isize + (y * w as f64 / 360.0).round() as isize).rem_euclid(w as isize) as usize;
            frame_scores.push(windowed_max(&s, predicted, cfg.bin_tolerance));
        }
        let consistent = !out_of_bounds && frame_scores.iter().all(|&v| v > threshold);
        hypotheses.push(LocationHypothesis {
            location: c.location,
            grid_index: c.grid_index,
            score: frame_scores.iter().sum(),
            best_bin: c.best_bin,
            heading_degrees: heading,
            consistent,
            frame_scores,
        });
    }
    let best = hypotheses
        .iter()
        .filter(|h| h.consistent)
        .fold(None::<&LocationHypothesis>, |acc, h| match acc {
            Some(b) if b.score > h.score || (b.score == h.score && b.grid_index < h.grid_index) => Some(b),
            _ => Some(h),
        })
        .cloned()
        .ok_or(Error::NoConsistentHypothesis)?;
    Ok(SearchOutcome {
        best,
        hypotheses,
        candidates,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::angle::angular_error;
    use crate::features::HandcraftedExtractor;
    use crate::geometry::{PolarConfig, TileConfig};
    use crate::synth::{generate_trajectory, generate_world, Motion, TrajectorySpec, WorldSpec};

    fn prior() -> GeoPoint {
        GeoPoint::new(47.0, 8.0).unwrap()
    }

    #[test]
    fn default_grid_has_2601_samples() {
        assert_eq!(sample_grid(prior(), &SearchConfig::default()).len(), 2601);
    }

    #[test]
    fn zero_region_is_the_prior() {
        let cfg = SearchConfig {
            region_meters: [0.0, 0.0],
            ..Default::default()
        };
        assert_eq!(sample_grid(prior(), &cfg), vec![prior()]);
    }

    #[test]
    fn coarse_spacing_gives_corners() {
        let cfg = SearchConfig {
            sample_spacing: 100.0,
            ..Default::default()
        };
        let g = sample_grid(prior(), &cfg);
        assert_eq!(g.len(), 4);
        let offsets: Vec<(f64, f64)> = g.iter().map(|p| p.offset_from(&prior())).collect();
        let expected = [(-50.0, 50.0), (50.0, 50.0), (-50.0, -50.0), (50.0, -50.0)];
        for ((e, n), (xe, xn)) in offsets.iter().zip(expected) {
            assert!((e - xe).abs() < 1e-6 && (n - xn).abs() < 1e-6);
        }
    }

    fn scenario(offset: [f64; 2], heading: f64) -> (crate::geometry::GeoRaster, PolarConfig, Vec<FrameObservation>, GeoPoint) {
        let world = generate_world(&WorldSpec {
            seed: 21,
            extent_meters: 300.0,
            ..Default::default()
        })
        .unwrap();
        let polar = PolarConfig {
            tile: TileConfig::default(),
            width: 480,
            height: 32,
        };
        let spec = TrajectorySpec {
            start: offset,
            motion: Motion::Sweep {
                start_heading: heading,
                sweep_degrees: 60.0,
                duration_seconds: 20.0 / 15.0,
            },
            polar,
            ..Default::default()
        };
        let frames = generate_trajectory(&world, &spec).unwrap();
        let truth = frames[0].truth.position;
        (world, polar, frames.into_iter().map(|f| f.observation).collect(), truth)
    }

    #[test]
    fn single_sample_region_returns_it() {
        let (world, polar, frames, truth) = scenario([5.0, 5.0], 30.0);
        let cfg = SearchConfig {
            region_meters: [0.0, 0.0],
            ..Default::default()
        };
        let out = search(&frames, &ReferenceSource::new(&world, polar), &HandcraftedExtractor::default(), &cfg).unwrap();
        assert_eq!(out.best.location, truth);
        assert_eq!(out.candidates.len(), 1);
    }

    #[test]
    fn stationary_search_finds_truth() {
        let (world, polar, mut frames, truth) = scenario([-6.0, 4.0], 123.0);
        // crude prior 5 m east, 3 m south of the truth
        let shifted = truth.offset_by(5.0, -3.0);
        for f in &mut frames {
            f.global_position = shifted;
        }
        let cfg = SearchConfig {
            region_meters: [16.0, 16.0],
            ..Default::default()
        };
        let out = search(&frames, &ReferenceSource::new(&world, polar), &HandcraftedExtractor::default(), &cfg).unwrap();
        let (e, n) = out.best.location.offset_from(&truth);
        // the truth sits between grid samples
        assert!((e * e + n * n).sqrt() <= 2.0 / 2f64.sqrt() * 1.5, "off by {e}, {n}");
        assert!(angular_error(out.best.heading_degrees, 123.0) <= 3.0);
        assert!(out.best.consistent);
        assert!(out.hypotheses.iter().filter(|h| h.consistent).all(|h| h.score <= out.best.score));
    }

    #[test]
    fn impossible_threshold_has_no_hypothesis() {
        let (world, polar, frames, _) = scenario([0.0, 0.0], 0.0);
        let cfg = SearchConfig {
            region_meters: [4.0, 4.0],
            threshold: SimilarityThreshold::Absolute(2.0),
            ..Default::default()
        };
        assert!(matches!(
            search(&frames, &ReferenceSource::new(&world, polar), &HandcraftedExtractor::default(), &cfg),
            Err(Error::NoConsistentHypothesis)
        ));
    }
}
