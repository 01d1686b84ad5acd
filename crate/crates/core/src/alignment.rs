//! Sliding-window orientation alignment between ground and reference features.
//!
//! The ground map slides circularly along the reference width; the score at
//! shift `i` is the inner product of the ground map with reference columns
//! `[i, i + W_G)`. The best shift is the heading bin of the ground view's
//! first column.

use crate::features::FeatureMap;
use crate::{Error, Result};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

/// Similarity per heading bin. Bin `i` spans `360 / len` degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityVector {
    pub scores: Vec<f64>,
}

impl SimilarityVector {
    pub fn new(scores: Vec<f64>) -> Self {
        Self { scores }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn granularity_degrees(&self) -> f64 {
        360.0 / self.scores.len() as f64
    }

    /// Lowest index of the maximum.
    pub fn argmax(&self) -> usize {
        argmax(&self.scores)
    }

    pub fn max(&self) -> f64 {
        self.scores[self.argmax()]
    }

    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.scores.iter().enumerate() {
            if v < self.scores[best] {
                best = i;
            }
        }
        best
    }

    pub fn min(&self) -> f64 {
        self.scores[self.argmin()]
    }

    /// Moves every score `n` bins to the right: `out[(i + n) mod W] = in[i]`.
    pub fn rotated(&self, n: isize) -> SimilarityVector {
        let w = self.scores.len() as isize;
        let mut out = vec![0.0; self.scores.len()];
        for (i, &v) in self.scores.iter().enumerate() {
            out[(i as isize + n).rem_euclid(w) as usize] = v;
        }
        SimilarityVector { scores: out }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_shapes(fg: &FeatureMap, fs: &FeatureMap) -> Result<()> {
    if fg.height() != fs.height() || fg.channels() != fs.channels() || fg.width() > fs.width() {
        return Err(Error::ShapeMismatch(format!(
            "ground {:?} cannot slide over reference {:?}",
            fg.shape(),
            fs.shape()
        )));
    }
    Ok(())
}

/// Direct evaluation of the circular sliding inner product.
pub fn sliding_similarity(fg: &FeatureMap, fs: &FeatureMap) -> Result<SimilarityVector> {
    check_shapes(fg, fs)?;
    let ws = fs.width();
    let mut scores = vec![0.0; ws];
    for (i, s) in scores.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..fg.channels() {
            for h in 0..fg.height() {
                for w in 0..fg.width() {
                    acc += fg.get(w, h, k) * fs.get((w + i) % ws, h, k);
                }
            }
        }
        *s = acc;
    }
    Ok(SimilarityVector { scores })
}

/// Frequency-domain evaluation of [`sliding_similarity`].
///
/// Every `(h, k)` row pair contributes `conj(G) * S` in the frequency domain;
/// the contributions are summed before a single inverse transform.
pub fn sliding_similarity_fast(fg: &FeatureMap, fs: &FeatureMap) -> Result<SimilarityVector> {
    check_shapes(fg, fs)?;
    let ws = fs.width();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(ws);
    let inv = planner.plan_fft_inverse(ws);
    let mut acc = vec![Complex::new(0.0, 0.0); ws];
    let mut gbuf = vec![Complex::new(0.0, 0.0); ws];
    let mut sbuf = vec![Complex::new(0.0, 0.0); ws];
    let mut scratch = vec![Complex::new(0.0, 0.0); fwd.get_inplace_scratch_len()];
    for (grow, srow) in fg.rows().zip(fs.rows()) {
        if grow.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (i, b) in gbuf.iter_mut().enumerate() {
            *b = Complex::new(grow.get(i).copied().unwrap_or(0.0), 0.0);
        }
        for (b, &v) in sbuf.iter_mut().zip(srow) {
            *b = Complex::new(v, 0.0);
        }
        fwd.process_with_scratch(&mut gbuf, &mut scratch);
        fwd.process_with_scratch(&mut sbuf, &mut scratch);
        for ((a, g), s) in acc.iter_mut().zip(&gbuf).zip(&sbuf) {
            *a += g.conj() * s;
        }
    }
    let mut scratch = vec![Complex::new(0.0, 0.0); inv.get_inplace_scratch_len()];
    inv.process_with_scratch(&mut acc, &mut scratch);
    let scale = 1.0 / ws as f64;
    Ok(SimilarityVector {
        scores: acc.iter().map(|c| c.re * scale).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub best_bin: usize,
    pub best_degrees: f64,
    pub ratio_confidence: f64,
    pub local_maxima: Vec<(usize, f64)>,
}

/// Local maxima of a circular vector.
///
/// A maximum is a run of equal scores strictly above both neighbouring bins;
/// it is reported at the run's leftmost bin (in circular order). A flat
/// vector has no maximum.
pub fn local_maxima(scores: &[f64]) -> Vec<(usize, f64)> {
    let n = scores.len();
    let mut out = vec![];
    // start just after a bin that differs from its successor so that no
    // plateau straddles the scan origin
    let Some(origin) = (0..n).find(|&i| scores[i] != scores[(i + 1) % n]) else {
        return out;
    };
    let mut i = (origin + 1) % n;
    let mut visited = 0;
    while visited < n {
        let v = scores[i];
        let mut len = 1;
        while len < n && scores[(i + len) % n] == v {
            len += 1;
        }
        if v > scores[(i + n - 1) % n] && v > scores[(i + len) % n] {
            out.push((i, v));
        }
        visited += len;
        i = (i + len) % n;
    }
    out.sort_by_key(|&(b, _)| b);
    out
}

/// Ratio confidence `1 - s2/s1` of the two best local maxima after shifting
/// the allowed scores so their minimum is zero.
fn ratio_from_maxima(maxima: &[(usize, f64)], floor: f64) -> f64 {
    match maxima.len() {
        0 => 0.0,
        1 => 1.0,
        _ => {
            let mut tops: Vec<f64> = maxima.iter().map(|m| m.1 - floor).collect();
            tops.sort_by(|a, b| b.total_cmp(a));
            if tops[0] <= 0.0 {
                0.0
            } else {
                (1.0 - tops[1] / tops[0]).clamp(0.0, 1.0)
            }
        }
    }
}

/// Peak analysis of a similarity vector.
pub fn best_alignment(s: &SimilarityVector) -> AlignmentResult {
    best_alignment_masked(s, |_| true)
}

/// [`best_alignment`] restricted to bins where `allowed` holds. Other bins
/// are treated as minus infinity for the argmax; local maxima are those of
/// the full vector that fall inside the allowed set, and the ratio floor is
/// the allowed minimum.
pub fn best_alignment_masked(s: &SimilarityVector, allowed: impl Fn(usize) -> bool) -> AlignmentResult {
    let n = s.len();
    let mut best: Option<usize> = None;
    let mut floor = f64::INFINITY;
    for i in 0..n {
        if !allowed(i) {
            continue;
        }
        floor = floor.min(s.scores[i]);
        if best.is_none_or(|b| s.scores[i] > s.scores[b]) {
            best = Some(i);
        }
    }
    let best_bin = best.unwrap_or(0);
    let local_maxima: Vec<_> = local_maxima(&s.scores)
        .into_iter()
        .filter(|&(b, _)| allowed(b))
        .collect();
    AlignmentResult {
        best_bin,
        best_degrees: 360.0 * best_bin as f64 / n.max(1) as f64,
        ratio_confidence: ratio_from_maxima(&local_maxima, floor),
        local_maxima,
    }
}

/// Columns `[start, start + width)` of `fs`, wrapping circularly.
pub fn shifted_reference_window(fs: &FeatureMap, start: usize, width: usize) -> Result<FeatureMap> {
    if start >= fs.width() || width == 0 || width > fs.width() {
        return Err(Error::BadWindow {
            start,
            width,
            total: fs.width(),
        });
    }
    let ws = fs.width();
    Ok(FeatureMap::from_fn(width, fs.height(), fs.channels(), |w, h, k| {
        fs.get((start + w) % ws, h, k)
    }))
}

/// Frobenius distance between `fg` and the reference window at `fs`'s best
/// alignment, together with that alignment bin.
pub fn aligned_distance(fg: &FeatureMap, fs: &FeatureMap) -> Result<(f64, usize)> {
    let s = sliding_similarity_auto(fg, fs)?;
    let bin = s.argmax();
    let win = shifted_reference_window(fs, bin, fg.width())?;
    Ok((fg.distance(&win)?, bin))
}

/// Picks the direct loop for small problems and the FFT path otherwise.
pub fn sliding_similarity_auto(fg: &FeatureMap, fs: &FeatureMap) -> Result<SimilarityVector> {
    if fs.width() <= 48 {
        sliding_similarity(fg, fs)
    } else {
        sliding_similarity_fast(fg, fs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::normalize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, k: usize) -> FeatureMap {
        FeatureMap::from_fn(w, h, k, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn all_ones_gives_constant_scores() {
        let fg = FeatureMap::from_fn(5, 3, 2, |_, _, _| 1.0);
        let fs = FeatureMap::from_fn(12, 3, 2, |_, _, _| 1.0);
        let s = sliding_similarity(&fg, &fs).unwrap();
        assert_eq!(s.len(), 12);
        assert!(s.scores.iter().all(|&v| v == 30.0));
        assert_eq!(s.granularity_degrees(), 30.0);
    }

    #[test]
    fn planted_window_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let fs = normalize(&random_map(&mut rng, 64, 4, 3)).unwrap();
            let k = rng.random_range(0..64);
            let fg = shifted_reference_window(&fs, k, 16).unwrap();
            // brute force over every shift, independent of the scorer
            let mut best = (0, f64::MIN);
            for i in 0..64 {
                let win = shifted_reference_window(&fs, i, 16).unwrap();
                let d: f64 = win.data().iter().zip(fg.data()).map(|(a, b)| a * b).sum();
                if d > best.1 {
                    best = (i, d);
                }
            }
            assert_eq!(best.0, k);
            assert_eq!(sliding_similarity(&fg, &fs).unwrap().argmax(), k);
        }
    }

    #[test]
    fn shape_errors() {
        let a = FeatureMap::zeros(8, 2, 3);
        let b = FeatureMap::zeros(4, 2, 3);
        assert!(matches!(sliding_similarity(&a, &b), Err(Error::ShapeMismatch(_))));
        let c = FeatureMap::zeros(8, 3, 3);
        assert!(matches!(sliding_similarity_fast(&b, &c), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn zero_ground_gives_zero_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fs = random_map(&mut rng, 64, 2, 2);
        let s = sliding_similarity_fast(&FeatureMap::zeros(10, 2, 2), &fs).unwrap();
        assert!(s.scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fast_matches_direct_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let wg = rng.random_range(1..=64);
            let fs = random_map(&mut rng, 64, 3, 4);
            let fg = random_map(&mut rng, wg, 3, 4);
            let a = sliding_similarity(&fg, &fs).unwrap();
            let b = sliding_similarity_fast(&fg, &fs).unwrap();
            let tol = 1e-5 * (wg * 3 * 4) as f64;
            for (x, y) in a.scores.iter().zip(&b.scores) {
                assert!((x - y).abs() < tol);
            }
        }
    }

    #[test]
    fn simple_peak() {
        let r = best_alignment(&SimilarityVector::new(vec![0.0, 3.0, 1.0]));
        assert_eq!(r.best_bin, 1);
        assert_eq!(r.local_maxima, vec![(1, 3.0)]);
        assert_eq!(r.ratio_confidence, 1.0);
        assert_eq!(r.best_degrees, 120.0);
    }

    #[test]
    fn ratio_of_two_peaks() {
        let r = best_alignment(&SimilarityVector::new(vec![0.0, 1.0, 0.0, 0.4, 0.0, 0.0]));
        assert_eq!(r.local_maxima.len(), 2);
        // direct evaluation of 1 - s2/s1 with min already 0
        assert!((r.ratio_confidence - (1.0 - 0.4 / 1.0)).abs() < 1e-12);
    }

    #[test]
    fn ratio_min_shifts_negative_scores() {
        let r = best_alignment(&SimilarityVector::new(vec![-2.0, -1.0, -2.0, -1.6, -2.0]));
        assert!((r.ratio_confidence - (1.0 - 0.4 / 1.0)).abs() < 1e-12);
    }

    #[test]
    fn tied_peaks_have_zero_confidence() {
        let r = best_alignment(&SimilarityVector::new(vec![0.0, 2.0, 0.0, 2.0]));
        assert_eq!(r.ratio_confidence, 0.0);
        assert_eq!(r.best_bin, 1);
    }

    #[test]
    fn plateau_reports_leftmost_and_wraps() {
        let m = local_maxima(&[5.0, 1.0, 2.0, 2.0, 1.0, 5.0]);
        assert_eq!(m, vec![(2, 2.0), (5, 5.0)]);
        let flat = best_alignment(&SimilarityVector::new(vec![1.0; 4]));
        assert!(flat.local_maxima.is_empty());
        assert_eq!(flat.ratio_confidence, 0.0);
        assert_eq!(flat.best_bin, 0);
    }

    #[test]
    fn masked_argmax_stays_in_window() {
        let s = SimilarityVector::new(vec![9.0, 0.0, 1.0, 3.0, 2.0, 0.0, 0.0, 8.0]);
        let r = best_alignment_masked(&s, |i| (2..=4).contains(&i));
        assert_eq!(r.best_bin, 3);
        assert_eq!(r.local_maxima, vec![(3, 3.0)]);
        // a slope into the window edge is not a peak
        let r = best_alignment_masked(&s, |i| (1..=2).contains(&i));
        assert_eq!(r.best_bin, 2);
        assert!(r.local_maxima.is_empty());
        assert_eq!(r.ratio_confidence, 0.0);
    }

    #[test]
    fn window_cases() {
        let fs = FeatureMap::from_fn(5, 1, 1, |w, _, _| w as f64);
        assert_eq!(shifted_reference_window(&fs, 0, 5).unwrap(), fs);
        assert_eq!(shifted_reference_window(&fs, 4, 2).unwrap().data(), &[4.0, 0.0]);
        assert!(matches!(shifted_reference_window(&fs, 5, 1), Err(Error::BadWindow { .. })));
        assert!(matches!(shifted_reference_window(&fs, 0, 6), Err(Error::BadWindow { .. })));
    }

    #[test]
    fn self_match_peaks_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = normalize(&random_map(&mut rng, 32, 2, 3)).unwrap();
        let s = sliding_similarity(&f, &f).unwrap();
        assert!((s.scores[0] - 1.0).abs() < 1e-12);
        assert!(s.scores.iter().all(|&v| v <= s.scores[0] + 1e-12));
    }

    proptest! {
        #[test]
        fn circular_equivariance(seed in 0u64..500, j in 0usize..24, wg in 1usize..24) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fs = random_map(&mut rng, 24, 2, 2);
            let fg = random_map(&mut rng, wg, 2, 2);
            let base = sliding_similarity(&fg, &fs).unwrap();
            let shifted = sliding_similarity(&fg, &fs.roll_columns(-(j as isize))).unwrap();
            for i in 0..24 {
                prop_assert_eq!(shifted.scores[i], base.scores[(i + 24 - j) % 24]);
            }
        }

        #[test]
        fn window_round_trip(seed in 0u64..500, k in 0usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fs = normalize(&random_map(&mut rng, 40, 2, 3)).unwrap();
            let win = shifted_reference_window(&fs, k, 12).unwrap();
            prop_assert_eq!(sliding_similarity(&win, &fs).unwrap().argmax(), k);
        }

        #[test]
        fn positive_scaling_keeps_argmax(seed in 0u64..500, a in 0.01f64..100.0, b in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fs = random_map(&mut rng, 32, 2, 2);
            let fg = random_map(&mut rng, 8, 2, 2);
            let s0 = sliding_similarity(&fg, &fs).unwrap().argmax();
            let s1 = sliding_similarity(&fg.scaled(a), &fs.scaled(b)).unwrap().argmax();
            prop_assert_eq!(s0, s1);
        }

        #[test]
        fn fast_path_property(seed in 0u64..500, wg in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fs = random_map(&mut rng, 30, 2, 2);
            let fg = random_map(&mut rng, wg, 2, 2);
            let a = sliding_similarity(&fg, &fs).unwrap();
            let b = sliding_similarity_fast(&fg, &fs).unwrap();
            for (x, y) in a.scores.iter().zip(&b.scores) {
                prop_assert!((x - y).abs() < 1e-5 * (wg * 4) as f64);
            }
        }
    }
}
