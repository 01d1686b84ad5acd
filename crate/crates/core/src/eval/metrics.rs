//! Retrieval recall and orientation accuracy.

use crate::alignment::aligned_distance;
use crate::angle::angular_error;
use crate::features::FeatureMap;
use crate::{Error, Result};

/// 1-based rank of each query's paired reference by aligned Frobenius distance.
///
/// Ties with the paired reference are broken by reference index.
pub fn retrieval_ranks(queries: &[FeatureMap], references: &[FeatureMap], pairing: &[usize]) -> Result<Vec<usize>> {
    if queries.is_empty() || references.is_empty() {
        return Err(Error::EmptySet);
    }
    if pairing.len() != queries.len() || pairing.iter().any(|&p| p >= references.len()) {
        return Err(Error::ShapeMismatch("pairing does not index the reference set".into()));
    }
    queries
        .iter()
        .zip(pairing)
        .map(|(q, &truth)| {
            let d: Vec<f64> = references
                .iter()
                .map(|r| aligned_distance(q, r).map(|x| x.0))
                .collect::<Result<_>>()?;
            Ok(ranks_from_distances(&d, truth))
        })
        .collect()
}

/// Rank of `truth` within `distances`, smaller is better.
pub fn ranks_from_distances(distances: &[f64], truth: usize) -> usize {
    let dt = distances[truth];
    1 + distances
        .iter()
        .enumerate()
        .filter(|&(j, &d)| d < dt || (d == dt && j < truth))
        .count()
}

/// Fraction of ranks within each `k`; `k` beyond the set size counts everything.
pub fn recall_from_ranks(ranks: &[usize], ks: &[usize]) -> Result<Vec<f64>> {
    if ranks.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
        .collect())
}

pub fn recall_at_k(
    queries: &[FeatureMap],
    references: &[FeatureMap],
    pairing: &[usize],
    ks: &[usize],
) -> Result<Vec<f64>> {
    recall_from_ranks(&retrieval_ranks(queries, references, pairing)?, ks)
}

/// Fraction of wrapped heading errors at or below each threshold.
pub fn orientation_accuracy(estimates: &[f64], truths: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if estimates.is_empty() {
        return Err(Error::EmptySet);
    }
    if estimates.len() != truths.len() {
        return Err(Error::ShapeMismatch("estimates and truths differ in length".into()));
    }
    let errors: Vec<f64> = estimates.iter().zip(truths).map(|(e, t)| angular_error(*e, *t)).collect();
    Ok(accuracy_from_errors(&errors, thresholds))
}

pub fn accuracy_from_errors(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&j| errors.iter().filter(|&&e| e <= j + 1e-9).count() as f64 / errors.len().max(1) as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::normalize;
    use proptest::prelude::*;

    #[test]
    fn identical_pairs_have_perfect_recall() {
        // one-hot columns in separate channels are orthogonal at every shift
        let maps: Vec<FeatureMap> = (0..4)
            .map(|i| FeatureMap::from_fn(4, 1, 4, |w, _, k| if k == i && w == 0 { 1.0 } else { 0.0 }))
            .collect();
        let r = recall_at_k(&maps, &maps, &[0, 1, 2, 3], &[1]).unwrap();
        assert_eq!(r, vec![1.0]);
    }

    #[test]
    fn hand_ranked_set() {
        // query 2 has two closer references than its own
        let d = [
            [0.1, 0.5, 0.6, 0.7],
            [0.9, 0.2, 0.6, 0.7],
            [0.3, 0.4, 0.5, 0.9],
            [0.9, 0.8, 0.7, 0.1],
        ];
        let ranks: Vec<usize> = (0..4).map(|q| ranks_from_distances(&d[q], q)).collect();
        assert_eq!(ranks, vec![1, 1, 3, 1]);
        assert_eq!(recall_from_ranks(&ranks, &[1, 5]).unwrap(), vec![0.75, 1.0]);
    }

    #[test]
    fn wrapped_error_thresholds() {
        let truth = [0.0; 4];
        // 359 is one degree from 0 on the circle
        let est = [1.0, 3.0, 359.0, 10.0];
        let acc = orientation_accuracy(&est, &truth, &[2.0, 4.0, 12.0]).unwrap();
        assert_eq!(acc, vec![0.5, 0.75, 1.0]);
    }

    #[test]
    fn empty_sets_rejected() {
        assert!(matches!(orientation_accuracy(&[], &[], &[2.0]), Err(Error::EmptySet)));
        assert!(matches!(recall_at_k(&[], &[], &[], &[1]), Err(Error::EmptySet)));
    }

    proptest! {
        #[test]
        fn recall_monotone_in_k(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let refs: Vec<FeatureMap> = (0..n)
                .map(|_| normalize(&FeatureMap::from_fn(6, 2, 2, |_, _, _| rng.random_range(-1.0..1.0))).unwrap())
                .collect();
            let queries: Vec<FeatureMap> = (0..n)
                .map(|_| normalize(&FeatureMap::from_fn(3, 2, 2, |_, _, _| rng.random_range(-1.0..1.0))).unwrap())
                .collect();
            let pairing: Vec<usize> = (0..n).collect();
            let r = recall_at_k(&queries, &refs, &pairing, &[1, 2, 3, 5, 10]).unwrap();
            prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(r[4], 1.0);
        }

        #[test]
        fn accuracy_monotone_in_threshold(errs in proptest::collection::vec(0.0f64..360.0, 1..30)) {
            let truth = vec![0.0; errs.len()];
            let a = orientation_accuracy(&errs, &truth, &[2.0, 4.0, 6.0, 12.0, 180.0]).unwrap();
            prop_assert!(a.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(a[4], 1.0);
        }
    }
}
