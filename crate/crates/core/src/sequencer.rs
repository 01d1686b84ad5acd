//! Multi-frame heading estimation.
//!
//! Each frame's similarity vector is buffered with its dummy orientation (the
//! heading relative to the first frame, integrated from odometry). Buffered
//! vectors are shifted into the current frame's orientation and summed; the
//! peak of the sum is gated on field-of-view coverage and the ratio test.

use crate::alignment::{best_alignment_masked, sliding_similarity_auto, SimilarityVector};
use crate::angle::{angular_error, wrap_degrees, wrapped_difference};
use crate::features::{FeatureExtractor, FeatureMap};
use crate::geometry::{GeoPoint, ReferenceSource};
use crate::image::Image;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// One time step from the navigation source.
#[derive(Debug, Clone)]
pub struct FrameObservation {
    pub image: Image,
    pub global_position: GeoPoint,
    /// Heading change since the previous frame, degrees clockwise.
    pub heading_delta: f64,
    /// Displacement since the previous frame as `[east, north]` meters in the
    /// odometry frame (the frame whose north is dummy orientation 0).
    pub translation: [f64; 2],
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub similarity: SimilarityVector,
    /// In `[0, 360)`.
    pub dummy_orientation: f64,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ColdStart,
    Refine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepMode {
    ColdStart,
    /// Restrict the estimate to `refine_window` degrees around the
    /// navigation prior for the current frame.
    Refine { prior_heading: f64 },
}

impl StepMode {
    pub fn mode(&self) -> Mode {
        match self {
            StepMode::ColdStart => Mode::ColdStart,
            StepMode::Refine { .. } => Mode::Refine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadingEstimate {
    pub timestamp: f64,
    /// Heading of the current frame's first column, `[0, 360)`.
    pub heading_degrees: f64,
    pub best_bin: usize,
    pub ratio_confidence: f64,
    pub fov_coverage_degrees: f64,
    pub accepted: bool,
    pub mode: Mode,
    pub frames_in_buffer: usize,
    pub dummy_orientation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequencerConfig {
    /// Entries older than this, relative to the newest, are evicted.
    pub tau_seconds: f64,
    /// Optional cap on buffered frames, applied after time eviction.
    pub max_frames: Option<usize>,
    pub fov_threshold: f64,
    pub ratio_threshold: f64,
    pub camera_fov: f64,
    /// Half-width of the refine-mode search window, degrees.
    pub refine_window: f64,
}

impl Default for SequencerConfig {
    fn default() -> Self {
        Self {
            tau_seconds: 10.0,
            max_frames: None,
            fov_threshold: 120.0,
            ratio_threshold: 0.3,
            camera_fov: 69.0,
            refine_window: 6.0,
        }
    }
}

impl SequencerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.tau_seconds > 0.0) {
            return bad("tau_seconds must be positive");
        }
        if self.max_frames == Some(0) {
            return bad("max_frames must be positive");
        }
        if !(self.fov_threshold > 0.0 && self.fov_threshold <= 360.0) {
            return bad("fov_threshold must be in (0, 360]");
        }
        if !(0.0..=1.0).contains(&self.ratio_threshold) {
            return bad("ratio_threshold must be in [0, 1]");
        }
        if !(self.camera_fov > 0.0 && self.camera_fov <= 360.0) {
            return Err(Error::InvalidFov(self.camera_fov));
        }
        if !(self.refine_window > 0.0 && self.refine_window <= 180.0) {
            return bad("refine_window must be in (0, 180]");
        }
        Ok(())
    }
}

/// Dummy orientation after applying `delta` to `prev_y`, wrapped to `[0, 360)`.
pub fn track_dummy_orientation(prev_y: f64, delta: f64) -> f64 {
    wrap_degrees(prev_y + delta)
}

/// Sum of the buffered vectors, each moved into the orientation of `current_y`.
pub fn accumulate(buffer: &[BufferEntry], current_y: f64) -> Result<SimilarityVector> {
    let first = buffer.first().ok_or(Error::EmptySet)?;
    let w = first.similarity.len();
    let mut acc = vec![0.0; w];
    for e in buffer {
        if e.similarity.len() != w {
            return Err(Error::MixedGranularity(w, e.similarity.len()));
        }
        let shift = (wrapped_difference(current_y, e.dummy_orientation) * w as f64 / 360.0).round() as isize;
        for (i, &v) in e.similarity.scores.iter().enumerate() {
            acc[(i as isize + shift).rem_euclid(w as isize) as usize] += v;
        }
    }
    Ok(SimilarityVector::new(acc))
}

/// Measure of the union of arcs of width `width` centred on `centers`, capped at 360.
pub fn arc_union_degrees(centers: impl IntoIterator<Item = f64>, width: f64) -> f64 {
    if width >= 360.0 {
        return 360.0;
    }
    let mut spans = vec![];
    for c in centers {
        let start = wrap_degrees(c - width / 2.0);
        let end = start + width;
        if end > 360.0 {
            spans.push((start, 360.0));
            spans.push((0.0, end - 360.0));
        } else {
            spans.push((start, end));
        }
    }
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut current: Option<(f64, f64)> = None;
    for (s, e) in spans {
        match current {
            Some((cs, ce)) if s <= ce => current = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                current = Some((s, e));
            }
            None => current = Some((s, e)),
        }
    }
    if let Some((cs, ce)) = current {
        total += ce - cs;
    }
    total.min(360.0)
}

/// Angular field of view covered by the buffered frames.
pub fn fov_coverage(buffer: &[BufferEntry], camera_fov: f64) -> f64 {
    arc_union_degrees(buffer.iter().map(|e| e.dummy_orientation), camera_fov)
}

/// Streaming heading estimator holding the accumulation buffer.
#[derive(Debug, Clone)]
pub struct Sequencer {
    config: SequencerConfig,
    buffer: Vec<BufferEntry>,
    origin: f64,
    last_y: Option<f64>,
    last_timestamp: Option<f64>,
    cached_reference: Option<(GeoPoint, FeatureMap)>,
}

impl Sequencer {
    pub fn new(config: SequencerConfig) -> Result<Self> {
        Self::with_dummy_origin(config, 0.0)
    }

    /// Starts the dummy orientation at `origin` instead of zero.
    pub fn with_dummy_origin(config: SequencerConfig, origin: f64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            buffer: vec![],
            origin: wrap_degrees(origin),
            last_y: None,
            last_timestamp: None,
            cached_reference: None,
        })
    }

    pub fn config(&self) -> &SequencerConfig {
        &self.config
    }

    pub fn buffer(&self) -> &[BufferEntry] {
        &self.buffer
    }

    /// Forgets the buffer and the dummy orientation track.
    pub fn reset(&mut self) {
        self.buffer.clear();
        self.last_y = None;
        self.last_timestamp = None;
    }

    /// Processes one camera frame end to end.
    pub fn step(
        &mut self,
        frame: &FrameObservation,
        refs: &ReferenceSource<'_>,
        extractor: &dyn FeatureExtractor,
        mode: StepMode,
    ) -> Result<HeadingEstimate> {
        self.check_timestamp(frame.timestamp)?;
        let fs = match &self.cached_reference {
            Some((p, f)) if *p == frame.global_position => f.clone(),
            _ => {
                let f = extractor.reference_features(&refs.polar_at(frame.global_position)?)?;
                self.cached_reference = Some((frame.global_position, f.clone()));
                f
            }
        };
        let fg = extractor.ground_features(&frame.image)?;
        let s = sliding_similarity_auto(&fg, &fs)?;
        self.push_similarity(frame.timestamp, frame.heading_delta, s, mode)
    }

    fn check_timestamp(&self, t: f64) -> Result<()> {
        if !t.is_finite() {
            return Err(Error::InvalidConfig("non-finite timestamp".into()));
        }
        match self.last_timestamp {
            Some(prev) if t <= prev => Err(Error::NonMonotonicTimestamp { prev, next: t }),
            _ => Ok(()),
        }
    }

    /// Buffers an already computed similarity vector and emits the gated estimate.
    pub fn push_similarity(
        &mut self,
        timestamp: f64,
        heading_delta: f64,
        similarity: SimilarityVector,
        mode: StepMode,
    ) -> Result<HeadingEstimate> {
        self.check_timestamp(timestamp)?;
        if !heading_delta.is_finite() {
            return Err(Error::InvalidConfig("non-finite heading delta".into()));
        }
        if similarity.is_empty() || similarity.scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation("similarity"));
        }
        if let Some(e) = self.buffer.first() {
            if e.similarity.len() != similarity.len() {
                return Err(Error::MixedGranularity(e.similarity.len(), similarity.len()));
            }
        }
        if let StepMode::Refine { prior_heading } = mode {
            if !prior_heading.is_finite() {
                return Err(Error::InvalidConfig("non-finite prior heading".into()));
            }
        }

        let y = match self.last_y {
            None => self.origin,
            Some(prev) => track_dummy_orientation(prev, heading_delta),
        };
        self.buffer.push(BufferEntry {
            similarity,
            dummy_orientation: y,
            timestamp,
        });
        let tau = self.config.tau_seconds;
        self.buffer.retain(|e| timestamp - e.timestamp <= tau);
        if let Some(m) = self.config.max_frames {
            let excess = self.buffer.len().saturating_sub(m);
            self.buffer.drain(..excess);
        }
        self.last_y = Some(y);
        self.last_timestamp = Some(timestamp);

        let acc = accumulate(&self.buffer, y)?;
        let coverage = fov_coverage(&self.buffer, self.config.camera_fov);
        let g = acc.granularity_degrees();
        let (result, accepted) = match mode {
            StepMode::ColdStart => {
                let r = best_alignment_masked(&acc, |_| true);
                let ok = r.ratio_confidence >= self.config.ratio_threshold && coverage >= self.config.fov_threshold;
                (r, ok)
            }
            StepMode::Refine { prior_heading } => {
                let window = self.config.refine_window;
                let r = best_alignment_masked(&acc, |i| angular_error(i as f64 * g, prior_heading) <= window);
                let ok = r.ratio_confidence >= self.config.ratio_threshold;
                (r, ok)
            }
        };
        Ok(HeadingEstimate {
            timestamp,
            heading_degrees: result.best_degrees,
            best_bin: result.best_bin,
            ratio_confidence: result.ratio_confidence,
            fov_coverage_degrees: coverage,
            accepted,
            mode: mode.mode(),
            frames_in_buffer: self.buffer.len(),
            dummy_orientation: y,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::HandcraftedExtractor;
    use crate::geometry::{PolarConfig, TileConfig};
    use crate::synth::{generate_trajectory, generate_world, Motion, TrajectorySpec, WorldSpec};
    use proptest::prelude::*;

    fn peak(w: usize, at: usize) -> SimilarityVector {
        SimilarityVector::new(
            (0..w)
                .map(|i| {
                    let d = crate::angle::bin_distance(i, at, w) as f64;
                    (-d * d / 50.0).exp()
                })
                .collect(),
        )
    }

    fn entry(s: SimilarityVector, y: f64, t: f64) -> BufferEntry {
        BufferEntry {
            similarity: s,
            dummy_orientation: y,
            timestamp: t,
        }
    }

    #[test]
    fn dummy_orientation_wraps() {
        assert_eq!(track_dummy_orientation(0.0, 0.0), 0.0);
        assert_eq!(track_dummy_orientation(350.0, 20.0), 10.0);
        assert_eq!(track_dummy_orientation(10.0, -20.0), 350.0);
    }

    #[test]
    fn single_entry_accumulates_to_itself() {
        let s = peak(36, 5);
        assert_eq!(accumulate(&[entry(s.clone(), 40.0, 0.0)], 40.0).unwrap(), s);
    }

    #[test]
    fn two_entry_shift_matches_hand_oracle() {
        let s1 = SimilarityVector::new((0..360).map(|i| (i as f64 * 0.37).sin()).collect());
        let s2 = SimilarityVector::new((0..360).map(|i| (i as f64 * 0.11).cos()).collect());
        let acc = accumulate(&[entry(s1.clone(), 0.0, 0.0), entry(s2.clone(), 45.0, 1.0)], 45.0).unwrap();
        for i in 0..360 {
            let expected = s2.scores[i] + s1.scores[(i + 360 - 45) % 360];
            assert_eq!(acc.scores[i], expected);
        }
    }

    #[test]
    fn mixed_granularity_rejected() {
        let b = [entry(peak(36, 0), 0.0, 0.0), entry(peak(72, 0), 0.0, 1.0)];
        assert!(matches!(accumulate(&b, 0.0), Err(Error::MixedGranularity(36, 72))));
    }

    #[test]
    fn coverage_cases() {
        assert!((arc_union_degrees([10.0], 69.0) - 69.0).abs() < 1e-12);
        assert!((arc_union_degrees([0.0, 60.0], 69.0) - 129.0).abs() < 1e-12);
        assert!((arc_union_degrees([0.0, 200.0], 69.0) - 138.0).abs() < 1e-12);
        let full: Vec<f64> = (0..12).map(|i| i as f64 * 30.0).collect();
        assert_eq!(arc_union_degrees(full, 69.0), 360.0);
        assert_eq!(arc_union_degrees([5.0], 360.0), 360.0);
    }

    proptest! {
        #[test]
        fn coverage_is_monotone(ys in proptest::collection::vec(0.0f64..360.0, 1..20), extra in 0.0f64..360.0, fov in 1.0f64..200.0) {
            let before = arc_union_degrees(ys.iter().copied(), fov);
            let after = arc_union_degrees(ys.iter().copied().chain([extra]), fov);
            prop_assert!(after + 1e-9 >= before);
            prop_assert!(after <= 360.0);
        }
    }

    #[test]
    fn single_stationary_frame_is_rejected() {
        let mut seq = Sequencer::new(SequencerConfig::default()).unwrap();
        let est = seq.push_similarity(0.0, 0.0, peak(360, 100), StepMode::ColdStart).unwrap();
        assert_eq!(est.ratio_confidence, 1.0);
        assert!((est.fov_coverage_degrees - 69.0).abs() < 1e-12);
        assert!(!est.accepted);
    }

    #[test]
    fn buffer_respects_tau() {
        let mut seq = Sequencer::new(SequencerConfig {
            tau_seconds: 2.0,
            ..Default::default()
        })
        .unwrap();
        for i in 0..40 {
            let t = i as f64 * 0.25;
            seq.push_similarity(t, 3.0, peak(36, 0), StepMode::ColdStart).unwrap();
            let newest = seq.buffer().last().unwrap().timestamp;
            assert!(seq.buffer().iter().all(|e| newest - e.timestamp <= 2.0));
        }
        assert_eq!(seq.buffer().len(), 9);
    }

    #[test]
    fn max_frames_caps_buffer() {
        let mut seq = Sequencer::new(SequencerConfig {
            max_frames: Some(3),
            ..Default::default()
        })
        .unwrap();
        for i in 0..10 {
            seq.push_similarity(i as f64, 0.0, peak(36, 0), StepMode::ColdStart).unwrap();
        }
        assert_eq!(seq.buffer().len(), 3);
    }

    #[test]
    fn failed_step_leaves_state_unchanged() {
        let mut seq = Sequencer::new(SequencerConfig::default()).unwrap();
        seq.push_similarity(1.0, 0.0, peak(36, 0), StepMode::ColdStart).unwrap();
        let before = seq.buffer().to_vec();
        assert!(matches!(
            seq.push_similarity(0.5, 10.0, peak(36, 0), StepMode::ColdStart),
            Err(Error::NonMonotonicTimestamp { .. })
        ));
        assert!(matches!(
            seq.push_similarity(2.0, 10.0, peak(72, 0), StepMode::ColdStart),
            Err(Error::MixedGranularity(36, 72))
        ));
        assert_eq!(seq.buffer(), &before[..]);
        let est = seq.push_similarity(2.0, 10.0, peak(36, 0), StepMode::ColdStart).unwrap();
        assert_eq!(est.dummy_orientation, 10.0);
    }

    #[test]
    fn refine_estimate_stays_in_window() {
        let mut seq = Sequencer::new(SequencerConfig::default()).unwrap();
        // strongest peak far from the prior, weaker true peak near it
        let mut s = peak(360, 200);
        for (i, v) in peak(360, 53).scores.iter().enumerate() {
            s.scores[i] += 0.5 * v;
        }
        let est = seq
            .push_similarity(0.0, 0.0, s, StepMode::Refine { prior_heading: 50.0 })
            .unwrap();
        assert_eq!(est.mode, Mode::Refine);
        assert!(angular_error(est.heading_degrees, 50.0) <= 6.0);
        assert_eq!(est.best_bin, 53);
    }

    fn sweep_stream(w: usize, deltas: &[f64], truth0: usize) -> Vec<SimilarityVector> {
        let mut h = truth0 as f64;
        let mut out = vec![];
        for (i, d) in deltas.iter().enumerate() {
            if i > 0 {
                h += d;
            }
            out.push(peak(w, (h.round() as usize) % w));
        }
        out
    }

    #[test]
    fn constant_dummy_offset_changes_nothing() {
        let deltas = [0.0, 12.0, 12.0, 12.0, 12.0, 12.0, 12.0, 12.0, 12.0, 12.0];
        let stream = sweep_stream(360, &deltas, 77);
        let run = |origin: f64| {
            let mut seq = Sequencer::with_dummy_origin(SequencerConfig::default(), origin).unwrap();
            stream
                .iter()
                .zip(deltas)
                .enumerate()
                .map(|(i, (s, d))| {
                    let e = seq.push_similarity(i as f64, d, s.clone(), StepMode::ColdStart).unwrap();
                    (e.accepted, e.best_bin, e.fov_coverage_degrees)
                })
                .collect::<Vec<_>>()
        };
        let base = run(0.0);
        assert!(base.last().unwrap().0);
        assert_eq!(base.last().unwrap().1, 77 + 108);
        assert_eq!(run(90.0), base);
        assert_eq!(run(215.0), base);
    }

    fn sweep_world() -> (crate::geometry::GeoRaster, PolarConfig) {
        let world = generate_world(&WorldSpec {
            seed: 11,
            extent_meters: 300.0,
            ..Default::default()
        })
        .unwrap();
        let polar = PolarConfig {
            tile: TileConfig::default(),
            width: 1440,
            height: 32,
        };
        (world, polar)
    }

    #[test]
    fn ten_frame_sweep_accumulates_to_true_bin() {
        let (world, polar) = sweep_world();
        let spec = TrajectorySpec {
            start: [8.0, -5.0],
            motion: Motion::Sweep {
                start_heading: 40.0,
                sweep_degrees: 120.0,
                duration_seconds: 10.0 / 15.0,
            },
            polar,
            ..Default::default()
        };
        let frames = generate_trajectory(&world, &spec).unwrap();
        assert_eq!(frames.len(), 10);
        let refs = ReferenceSource::new(&world, polar);
        let mut seq = Sequencer::new(SequencerConfig::default()).unwrap();
        let ex = HandcraftedExtractor::default();
        let mut last = None;
        for f in &frames {
            last = Some(seq.step(&f.observation, &refs, &ex, StepMode::ColdStart).unwrap());
        }
        let est = last.unwrap();
        let truth = frames.last().unwrap().truth.heading_degrees;
        assert!(angular_error(est.heading_degrees, truth) <= 1.0 + 1e-9, "{est:?} vs {truth}");
        assert!(est.accepted);
    }
}
