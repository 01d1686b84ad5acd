//! Orientation-weighted soft-margin triplet loss.
//!
//! For a ground map `fg`, its matching reference `fs+` and a non-matching
//! reference `fs-`:
//!
//! ```text
//! L_GS  = ln(1 + exp(alpha * (d+ - d-)))
//! W_Ori = 1 + beta * (S_max - S_gt) / (S_max - S_min)      S = sim(fg, fs+)
//! L_T   = W_Ori * L_GS
//! ```
//!
//! `d+`, `d-` are Frobenius distances between `fg` and each reference's
//! window at that reference's own best alignment. `W_Ori` is not detached:
//! its gradient flows into the similarity scores at the max, min and
//! ground-truth bins.

use crate::alignment::{shifted_reference_window, sliding_similarity_auto, SimilarityVector};
use crate::features::FeatureMap;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeStrategy {
    /// Every other reference in the batch is a negative for every anchor.
    AllInBatch,
    /// Only the closest non-matching reference per anchor.
    Hardest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub negatives: NegativeStrategy,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 5.0,
            negatives: NegativeStrategy::AllInBatch,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss needs alpha > 0 and beta >= 0 (got {}, {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub ground: Vec<FeatureMap>,
    pub reference: Vec<FeatureMap>,
    pub gt_bins: Vec<usize>,
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn soft_margin_triplet(d_pos: f64, d_neg: f64, alpha: f64) -> f64 {
    softplus(alpha * (d_pos - d_neg))
}

/// `1 + beta (S_max - S_gt) / (S_max - S_min)`; exactly 1 for a flat vector.
pub fn orientation_weight(s: &SimilarityVector, gt_bin: usize, beta: f64) -> Result<f64> {
    if gt_bin >= s.len() {
        return Err(Error::ShapeMismatch(format!(
            "ground-truth bin {gt_bin} outside {} bins",
            s.len()
        )));
    }
    let (max, min) = (s.max(), s.min());
    if max == min {
        return Ok(1.0);
    }
    Ok(1.0 + beta * ((max - s.scores[gt_bin]) / (max - min)))
}

/// Gradient of [`orientation_weight`] as `(bin, d W / d s[bin])` terms.
fn orientation_weight_grad(s: &SimilarityVector, gt_bin: usize, beta: f64) -> Vec<(usize, f64)> {
    let (imax, imin) = (s.argmax(), s.argmin());
    let (max, min, gt) = (s.scores[imax], s.scores[imin], s.scores[gt_bin]);
    let range = max - min;
    if range == 0.0 {
        return vec![];
    }
    vec![
        (imax, beta * (gt - min) / (range * range)),
        (gt_bin, -beta / range),
        (imin, beta * (max - gt) / (range * range)),
    ]
}

/// Aligned comparison of one ground map against one reference map.
struct Aligned {
    sim: SimilarityVector,
    bin: usize,
    distance: f64,
}

fn align(fg: &FeatureMap, fs: &FeatureMap) -> Result<Aligned> {
    let sim = sliding_similarity_auto(fg, fs)?;
    let bin = sim.argmax();
    let win = shifted_reference_window(fs, bin, fg.width())?;
    let distance = fg.distance(&win)?;
    Ok(Aligned { sim, bin, distance })
}

pub fn pair_loss(
    fg: &FeatureMap,
    fs_pos: &FeatureMap,
    fs_neg: &FeatureMap,
    gt_bin: usize,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let pos = align(fg, fs_pos)?;
    let neg = align(fg, fs_neg)?;
    let w = orientation_weight(&pos.sim, gt_bin, cfg.beta)?;
    Ok(w * soft_margin_triplet(pos.distance, neg.distance, cfg.alpha))
}

fn check_batch(batch: &TripletBatch) -> Result<usize> {
    let b = batch.ground.len();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if batch.reference.len() != b || batch.gt_bins.len() != b {
        return Err(Error::ShapeMismatch("batch lists differ in length".into()));
    }
    Ok(b)
}

/// All aligned comparisons of a batch plus the selected `(anchor, negative)` terms.
struct BatchPlan {
    table: Vec<Vec<Aligned>>,
    weights: Vec<f64>,
    terms: Vec<(usize, usize)>,
}

fn plan(batch: &TripletBatch, cfg: &LossConfig) -> Result<BatchPlan> {
    cfg.validate()?;
    let b = check_batch(batch)?;
    let table = batch
        .ground
        .iter()
        .map(|fg| batch.reference.iter().map(|fs| align(fg, fs)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let weights = (0..b)
        .map(|i| orientation_weight(&table[i][i].sim, batch.gt_bins[i], cfg.beta))
        .collect::<Result<Vec<_>>>()?;
    let mut terms = vec![];
    for i in 0..b {
        match cfg.negatives {
            NegativeStrategy::AllInBatch => terms.extend((0..b).filter(|&j| j != i).map(|j| (i, j))),
            NegativeStrategy::Hardest => {
                let mut best: Option<usize> = None;
                for j in (0..b).filter(|&j| j != i) {
                    if best.is_none_or(|k| table[i][j].distance < table[i][k].distance) {
                        best = Some(j);
                    }
                }
                terms.push((i, best.expect("batch has at least two pairs")));
            }
        }
    }
    Ok(BatchPlan { table, weights, terms })
}

/// Mean orientation-weighted triplet loss over the batch.
pub fn batch_loss(batch: &TripletBatch, cfg: &LossConfig) -> Result<f64> {
    let p = plan(batch, cfg)?;
    let total: f64 = p
        .terms
        .iter()
        .map(|&(i, j)| p.weights[i] * soft_margin_triplet(p.table[i][i].distance, p.table[i][j].distance, cfg.alpha))
        .sum();
    Ok(total / p.terms.len() as f64)
}

/// Adds `coef * d(distance)/d(features)` for the aligned window at `bin`.
fn distance_grad(
    fg: &FeatureMap,
    fs: &FeatureMap,
    bin: usize,
    distance: f64,
    coef: f64,
    dg: &mut FeatureMap,
    ds: &mut FeatureMap,
) {
    if distance == 0.0 || coef == 0.0 {
        return;
    }
    let ws = fs.width();
    let c = coef / distance;
    for k in 0..fg.channels() {
        for h in 0..fg.height() {
            for w in 0..fg.width() {
                let sw = (w + bin) % ws;
                let diff = fg.get(w, h, k) - fs.get(sw, h, k);
                let gi = dg.index(w, h, k);
                dg.data_mut()[gi] += c * diff;
                let si = ds.index(sw, h, k);
                ds.data_mut()[si] -= c * diff;
            }
        }
    }
}

/// Adds `coef * d(S[bin])/d(features)`.
fn similarity_grad(fg: &FeatureMap, fs: &FeatureMap, bin: usize, coef: f64, dg: &mut FeatureMap, ds: &mut FeatureMap) {
    if coef == 0.0 {
        return;
    }
    let ws = fs.width();
    for k in 0..fg.channels() {
        for h in 0..fg.height() {
            for w in 0..fg.width() {
                let sw = (w + bin) % ws;
                let gi = dg.index(w, h, k);
                dg.data_mut()[gi] += coef * fs.get(sw, h, k);
                let si = ds.index(sw, h, k);
                ds.data_mut()[si] += coef * fg.get(w, h, k);
            }
        }
    }
}

/// [`batch_loss`] and its gradient with respect to every ground and reference map.
pub fn batch_loss_and_grad(
    batch: &TripletBatch,
    cfg: &LossConfig,
) -> Result<(f64, Vec<FeatureMap>, Vec<FeatureMap>)> {
    let p = plan(batch, cfg)?;
    let b = batch.ground.len();
    let scale = 1.0 / p.terms.len() as f64;
    let mut d_weight = vec![0.0; b];
    let mut d_dist = vec![vec![0.0; b]; b];
    let mut total = 0.0;
    for &(i, j) in &p.terms {
        let margin = cfg.alpha * (p.table[i][i].distance - p.table[i][j].distance);
        let lgs = softplus(margin);
        total += p.weights[i] * lgs;
        d_weight[i] += scale * lgs;
        let g = scale * p.weights[i] * cfg.alpha * sigmoid(margin);
        d_dist[i][i] += g;
        d_dist[i][j] -= g;
    }
    let mut dg: Vec<FeatureMap> = batch
        .ground
        .iter()
        .map(|f| FeatureMap::zeros(f.width(), f.height(), f.channels()))
        .collect();
    let mut ds: Vec<FeatureMap> = batch
        .reference
        .iter()
        .map(|f| FeatureMap::zeros(f.width(), f.height(), f.channels()))
        .collect();
    for i in 0..b {
        for (bin, dw) in orientation_weight_grad(&p.table[i][i].sim, batch.gt_bins[i], cfg.beta) {
            similarity_grad(&batch.ground[i], &batch.reference[i], bin, d_weight[i] * dw, &mut dg[i], &mut ds[i]);
        }
        for j in 0..b {
            let a = &p.table[i][j];
            distance_grad(
                &batch.ground[i],
                &batch.reference[j],
                a.bin,
                a.distance,
                d_dist[i][j],
                &mut dg[i],
                &mut ds[j],
            );
        }
    }
    Ok((total * scale, dg, ds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::normalize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, w: usize) -> FeatureMap {
        normalize(&FeatureMap::from_fn(w, 2, 3, |_, _, _| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn weight_at_trough_is_exactly_one_plus_beta() {
        // beta * a / a rounds above beta for this pair
        let s = SimilarityVector::new(vec![-0.41777353430382513, 0.5, 0.3]);
        let beta = 3.840678967903197;
        assert_eq!(orientation_weight(&s, 0, beta).unwrap(), 1.0 + beta);
    }

    #[test]
    fn triplet_scalar_values() {
        assert!((soft_margin_triplet(0.5, 0.5, 10.0) - 2f64.ln()).abs() < 1e-12);
        let expect = (1.0 + (-2.0f64).exp()).ln();
        assert!((soft_margin_triplet(0.1, 0.3, 10.0) - expect).abs() < 1e-12);
        assert!((expect - 0.126928).abs() < 1e-6);
        let mut prev = f64::MAX;
        for gap in [0.0, 1.0, 10.0, 100.0, 1000.0] {
            let v = soft_margin_triplet(0.0, gap, 10.0);
            assert!(v <= prev && v >= 0.0);
            prev = v;
        }
        assert_eq!(soft_margin_triplet(0.0, 1e6, 10.0), 0.0);
        assert!(soft_margin_triplet(1e6, 0.0, 10.0).is_finite());
    }

    #[test]
    fn orientation_weight_cases() {
        let s = SimilarityVector::new(vec![3.0, 1.0, 2.0]);
        assert_eq!(orientation_weight(&s, 0, 5.0).unwrap(), 1.0);
        assert_eq!(orientation_weight(&s, 1, 1.0).unwrap(), 2.0);
        assert_eq!(orientation_weight(&s, 1, 2.0).unwrap(), 1.0 + 2.0 * (3.0 - 1.0) / (3.0 - 1.0));
        assert_eq!(orientation_weight(&SimilarityVector::new(vec![1.0; 4]), 2, 5.0).unwrap(), 1.0);
        assert!(orientation_weight(&s, 3, 1.0).is_err());
    }

    #[test]
    fn degenerate_triplet() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fg = random_unit(&mut rng, 4);
        let fs = random_unit(&mut rng, 8);
        let cfg = LossConfig::default();
        let s = sliding_similarity_auto(&fg, &fs).unwrap();
        let w = orientation_weight(&s, 3, cfg.beta).unwrap();
        let l = pair_loss(&fg, &fs, &fs, 3, &cfg).unwrap();
        assert!((l - w * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn aligned_positive_has_unit_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fg = random_unit(&mut rng, 4);
        let fs = random_unit(&mut rng, 8);
        let fneg = random_unit(&mut rng, 8);
        let cfg = LossConfig::default();
        let gt = sliding_similarity_auto(&fg, &fs).unwrap().argmax();
        let (dp, _) = crate::alignment::aligned_distance(&fg, &fs).unwrap();
        let (dn, _) = crate::alignment::aligned_distance(&fg, &fneg).unwrap();
        let l = pair_loss(&fg, &fs, &fneg, gt, &cfg).unwrap();
        assert_eq!(l, soft_margin_triplet(dp, dn, cfg.alpha));
    }

    #[test]
    fn hand_built_two_bin_features() {
        // 1x1x1 ground, 2-column references
        let fg = FeatureMap::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let fpos = FeatureMap::from_vec(2, 1, 1, vec![0.2, 0.9]).unwrap();
        let fneg = FeatureMap::from_vec(2, 1, 1, vec![-0.5, 0.3]).unwrap();
        let cfg = LossConfig {
            alpha: 2.0,
            beta: 3.0,
            negatives: NegativeStrategy::AllInBatch,
        };
        // S+ = [0.2, 0.9]; best bin 1; d+ = |1 - 0.9| = 0.1
        // S- = [-0.5, 0.3]; best bin 1; d- = |1 - 0.3| = 0.7
        // gt bin 0: W = 1 + 3 (0.9 - 0.2) / (0.9 - 0.2) = 4
        let expect = 4.0 * (1.0 + (2.0f64 * (0.1 - 0.7)).exp()).ln();
        let got = pair_loss(&fg, &fpos, &fneg, 0, &cfg).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn batch_loss_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = TripletBatch {
            ground: (0..4).map(|_| random_unit(&mut rng, 5)).collect(),
            reference: (0..4).map(|_| random_unit(&mut rng, 10)).collect(),
            gt_bins: vec![0, 3, 7, 9],
        };
        let cfg = LossConfig::default();
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    sum += pair_loss(&batch.ground[i], &batch.reference[i], &batch.reference[j], batch.gt_bins[i], &cfg).unwrap();
                    count += 1;
                }
            }
        }
        assert_eq!(count, 12);
        assert!((batch_loss(&batch, &cfg).unwrap() - sum / 12.0).abs() < 1e-12);
        let two = TripletBatch {
            ground: batch.ground[..2].to_vec(),
            reference: batch.reference[..2].to_vec(),
            gt_bins: batch.gt_bins[..2].to_vec(),
        };
        let l01 = pair_loss(&two.ground[0], &two.reference[0], &two.reference[1], 0, &cfg).unwrap();
        let l10 = pair_loss(&two.ground[1], &two.reference[1], &two.reference[0], 3, &cfg).unwrap();
        assert!((batch_loss(&two, &cfg).unwrap() - (l01 + l10) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_references_give_log_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fs = random_unit(&mut rng, 6);
        let batch = TripletBatch {
            ground: (0..3).map(|_| random_unit(&mut rng, 6)).collect(),
            reference: vec![fs.clone(), fs.clone(), fs],
            gt_bins: vec![0, 0, 0],
        };
        let cfg = LossConfig {
            beta: 0.0,
            ..Default::default()
        };
        assert!((batch_loss(&batch, &cfg).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn too_small_batch() {
        let batch = TripletBatch {
            ground: vec![FeatureMap::zeros(1, 1, 1)],
            reference: vec![FeatureMap::zeros(1, 1, 1)],
            gt_bins: vec![0],
        };
        assert!(matches!(batch_loss(&batch, &LossConfig::default()), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn hardest_negative_uses_closest_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = TripletBatch {
            ground: (0..3).map(|_| random_unit(&mut rng, 4)).collect(),
            reference: (0..3).map(|_| random_unit(&mut rng, 8)).collect(),
            gt_bins: vec![1, 2, 3],
        };
        let cfg = LossConfig {
            negatives: NegativeStrategy::Hardest,
            ..Default::default()
        };
        let mut sum = 0.0;
        for i in 0..3 {
            let j = (0..3)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da = crate::alignment::aligned_distance(&batch.ground[i], &batch.reference[a]).unwrap().0;
                    let db = crate::alignment::aligned_distance(&batch.ground[i], &batch.reference[b]).unwrap().0;
                    da.total_cmp(&db)
                })
                .unwrap();
            sum += pair_loss(&batch.ground[i], &batch.reference[i], &batch.reference[j], batch.gt_bins[i], &cfg).unwrap();
        }
        assert!((batch_loss(&batch, &cfg).unwrap() - sum / 3.0).abs() < 1e-12);
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = TripletBatch {
            ground: (0..3).map(|_| random_unit(&mut rng, 4)).collect(),
            reference: (0..3).map(|_| random_unit(&mut rng, 8)).collect(),
            gt_bins: vec![1, 5, 2],
        };
        for negatives in [NegativeStrategy::AllInBatch, NegativeStrategy::Hardest] {
            let cfg = LossConfig {
                alpha: 3.0,
                beta: 2.0,
                negatives,
            };
            let (_, dg, ds) = batch_loss_and_grad(&batch, &cfg).unwrap();
            let eps = 1e-6;
            for which in 0..2 {
                for n in 0..3 {
                    for idx in 0..24 {
                        let bump = |delta: f64| {
                            let mut b = batch.clone();
                            let m = if which == 0 { &mut b.ground[n] } else { &mut b.reference[n] };
                            if idx < m.data().len() {
                                m.data_mut()[idx] += delta;
                            }
                            batch_loss(&b, &cfg).unwrap()
                        };
                        let grad = if which == 0 { &dg[n] } else { &ds[n] };
                        if idx >= grad.data().len() {
                            continue;
                        }
                        let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
                        assert!((fd - grad.data()[idx]).abs() < 1e-6, "{which} {n} {idx}: {fd} vs {}", grad.data()[idx]);
                    }
                }
            }
        }
    }

    #[test]
    fn unit_weight_reduces_to_plain_triplet_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = TripletBatch {
            ground: (0..2).map(|_| random_unit(&mut rng, 4)).collect(),
            reference: (0..2).map(|_| random_unit(&mut rng, 8)).collect(),
            gt_bins: vec![0, 0],
        };
        let plain = LossConfig {
            beta: 0.0,
            ..Default::default()
        };
        let (l, dg, _) = batch_loss_and_grad(&batch, &plain).unwrap();
        // independent plain soft-margin triplet evaluation
        let mut expect = 0.0;
        for (i, j) in [(0, 1), (1, 0)] {
            let (dp, _) = crate::alignment::aligned_distance(&batch.ground[i], &batch.reference[i]).unwrap();
            let (dn, _) = crate::alignment::aligned_distance(&batch.ground[i], &batch.reference[j]).unwrap();
            expect += soft_margin_triplet(dp, dn, plain.alpha) / 2.0;
        }
        assert!((l - expect).abs() < 1e-12);
        assert!(dg.iter().all(|g| g.is_finite()));
    }

    proptest! {
        #[test]
        fn weight_is_bounded(scores in prop::collection::vec(-10.0f64..10.0, 1..40), beta in 0.0f64..10.0, gt in 0usize..40) {
            let s = SimilarityVector::new(scores);
            let gt = gt % s.len();
            let w = orientation_weight(&s, gt, beta).unwrap();
            prop_assert!(w >= 1.0 && w <= 1.0 + beta + 1e-12);
            if s.scores[gt] == s.max() {
                prop_assert_eq!(w, 1.0);
            } else if beta > 0.0 {
                prop_assert!(w > 1.0);
            }
        }

        #[test]
        fn raising_gt_score_never_raises_weight(scores in prop::collection::vec(-5.0f64..5.0, 3..20), gt in 0usize..20, bump in 0.0f64..3.0) {
            let s = SimilarityVector::new(scores);
            let gt = gt % s.len();
            let target = s.max();
            let mut t = s.clone();
            t.scores[gt] = (s.scores[gt] + bump).min(target);
            prop_assert!(orientation_weight(&t, gt, 5.0).unwrap() <= orientation_weight(&s, gt, 5.0).unwrap() + 1e-12);
        }

        #[test]
        fn pair_loss_finite_at_extreme_margins(dp in 0.0f64..100.0, dn in 0.0f64..100.0) {
            let v = soft_margin_triplet(dp, dn, 500.0 / 100.0f64.max(1e-9) * 1.0);
            prop_assert!(v.is_finite() && v >= 0.0);
            let hi = soft_margin_triplet(500.0, 0.0, 1.0);
            let lo = soft_margin_triplet(0.0, 500.0, 1.0);
            prop_assert!(hi.is_finite() && lo >= 0.0 && lo.is_finite());
        }

        #[test]
        fn batch_loss_permutation_invariant(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ground: Vec<_> = (0..4).map(|_| random_unit(&mut rng, 3)).collect();
            let reference: Vec<_> = (0..4).map(|_| random_unit(&mut rng, 6)).collect();
            let gt_bins = vec![0usize, 1, 2, 5];
            let batch = TripletBatch { ground: ground.clone(), reference: reference.clone(), gt_bins: gt_bins.clone() };
            let order = [2usize, 0, 3, 1];
            let shuffled = TripletBatch {
                ground: order.iter().map(|&i| ground[i].clone()).collect(),
                reference: order.iter().map(|&i| reference[i].clone()).collect(),
                gt_bins: order.iter().map(|&i| gt_bins[i]).collect(),
            };
            let cfg = LossConfig::default();
            let a = batch_loss(&batch, &cfg).unwrap();
            let b = batch_loss(&shuffled, &cfg).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
