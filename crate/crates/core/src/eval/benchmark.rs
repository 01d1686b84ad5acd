//! Retrieval, orientation and coverage-gated benchmark tables.

use super::dataset::{SyntheticPair, Split};
use super::metrics::{accuracy_from_errors, ranks_from_distances, recall_from_ranks};
use crate::alignment::{shifted_reference_window, sliding_similarity_auto};
use crate::angle::angular_error;
use crate::features::{FeatureExtractor, FeatureMap, HandcraftedExtractor};
use crate::geometry::{PolarConfig, PolarImage, ReferenceSource, TileConfig};
use crate::sequencer::{Sequencer, SequencerConfig, StepMode};
use crate::synth::{generate_trajectory, generate_world, Motion, TrajectorySpec, WorldSpec};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Repeated cold-start sweeps scored at several coverage gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoverageStudy {
    /// Number of seeded sweeps; 0 skips the study.
    pub runs: usize,
    pub seed: u64,
    pub world: WorldSpec,
    /// Start heading is redrawn per run.
    pub trajectory: TrajectorySpec,
    pub sequencer: SequencerConfig,
    pub extractor: HandcraftedExtractor,
    /// Coverage gates in degrees; 0 is reported as "any".
    pub gates: Vec<f64>,
}

impl Default for CoverageStudy {
    fn default() -> Self {
        Self {
            runs: 10,
            seed: 0,
            world: WorldSpec::default(),
            trajectory: TrajectorySpec {
                polar: PolarConfig {
                    tile: TileConfig::default(),
                    width: 1440,
                    height: 32,
                },
                ..Default::default()
            },
            sequencer: SequencerConfig::default(),
            extractor: HandcraftedExtractor::default(),
            gates: vec![0.0, 120.0, 180.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub recall_ks: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub coverage: CoverageStudy,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            recall_ks: vec![1, 5, 10],
            thresholds: vec![2.0, 4.0, 6.0, 12.0],
            coverage: CoverageStudy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: usize,
    pub rank: usize,
    pub best_bin: usize,
    pub estimated_heading: f64,
    pub true_heading: f64,
    pub error_degrees: f64,
    pub latitude: f64,
    pub longitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    /// "any" or the gate in degrees.
    pub gate: String,
    pub runs: usize,
    /// Fraction of runs that produced an accepted estimate at this gate.
    pub answered: f64,
    /// Fraction of runs within each threshold; unanswered runs count as misses.
    pub accuracy: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall_at: BTreeMap<String, f64>,
    pub orientation_accuracy: BTreeMap<String, f64>,
    pub coverage_table: Vec<CoverageRow>,
    pub per_query: Vec<QueryRecord>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn key(x: f64) -> String {
    format!("{x}")
}

/// Scores the test split of `pairs` with `extractor` and runs the coverage study.
pub fn run_benchmark(pairs: &[SyntheticPair], extractor: &dyn FeatureExtractor, cfg: &BenchmarkConfig) -> Result<MetricsReport> {
    let test: Vec<&SyntheticPair> = pairs.iter().filter(|p| p.split == Split::Test).collect();
    if test.is_empty() {
        return Err(Error::EmptySet);
    }
    let queries: Vec<FeatureMap> = test.iter().map(|p| extractor.ground_features(&p.ground)).collect::<Result<_>>()?;
    let refs: Vec<FeatureMap> = test
        .iter()
        .map(|p| {
            extractor.reference_features(&PolarImage {
                pixels: p.reference.clone(),
                north_column: 0,
            })
        })
        .collect::<Result<_>>()?;

    let mut per_query = Vec::with_capacity(test.len());
    let mut ranks = Vec::with_capacity(test.len());
    let mut errors = Vec::with_capacity(test.len());
    for (i, q) in queries.iter().enumerate() {
        let mut dists = Vec::with_capacity(refs.len());
        let mut own_bin = 0;
        let mut bins = 0;
        for (j, r) in refs.iter().enumerate() {
            let s = sliding_similarity_auto(q, r)?;
            let bin = s.argmax();
            dists.push(q.distance(&shifted_reference_window(r, bin, q.width())?)?);
            if j == i {
                own_bin = bin;
                bins = s.len();
            }
        }
        let rank = ranks_from_distances(&dists, i);
        let estimate = own_bin as f64 * 360.0 / bins as f64;
        let error = angular_error(estimate, test[i].heading_degrees);
        ranks.push(rank);
        errors.push(error);
        per_query.push(QueryRecord {
            query: i,
            rank,
            best_bin: own_bin,
            estimated_heading: estimate,
            true_heading: test[i].heading_degrees,
            error_degrees: error,
            latitude: test[i].location.latitude,
            longitude: test[i].location.longitude,
        });
    }

    let recall = recall_from_ranks(&ranks, &cfg.recall_ks)?;
    let accuracy = accuracy_from_errors(&errors, &cfg.thresholds);
    Ok(MetricsReport {
        recall_at: cfg.recall_ks.iter().map(|k| k.to_string()).zip(recall).collect(),
        orientation_accuracy: cfg.thresholds.iter().map(|&t| key(t)).zip(accuracy).collect(),
        coverage_table: coverage_table(&cfg.coverage, &cfg.thresholds)?,
        per_query,
    })
}

/// One row per gate: the first accepted cold-start estimate once coverage
/// reaches the gate, scored against the truth of that frame.
pub fn coverage_table(study: &CoverageStudy, thresholds: &[f64]) -> Result<Vec<CoverageRow>> {
    if study.runs == 0 {
        return Ok(vec![]);
    }
    // first_error[g][r]: error of run r at gate g, if answered
    let mut first_error = vec![vec![None; study.runs]; study.gates.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(study.seed);
    for run in 0..study.runs {
        let world = generate_world(&WorldSpec {
            seed: study.world.seed.wrapping_add(run as u64),
            ..study.world.clone()
        })?;
        let mut traj = study.trajectory.clone();
        traj.seed = traj.seed.wrapping_add(run as u64);
        if let Motion::Sweep { start_heading, .. } = &mut traj.motion {
            *start_heading = rng.random_range(0.0..360.0);
        }
        let frames = generate_trajectory(&world, &traj)?;
        let refs = ReferenceSource::new(&world, traj.polar);
        let mut seq = Sequencer::new(SequencerConfig {
            camera_fov: traj.camera_fov,
            ..study.sequencer.clone()
        })?;
        for f in &frames {
            let est = seq.step(&f.observation, &refs, &study.extractor, StepMode::ColdStart)?;
            if est.ratio_confidence < seq.config().ratio_threshold {
                continue;
            }
            let err = angular_error(est.heading_degrees, f.truth.heading_degrees);
            for (g, &gate) in study.gates.iter().enumerate() {
                if first_error[g][run].is_none() && est.fov_coverage_degrees >= gate - 1e-9 {
                    first_error[g][run] = Some(err);
                }
            }
        }
    }
    Ok(study
        .gates
        .iter()
        .zip(&first_error)
        .map(|(&gate, errs)| {
            let answered: Vec<f64> = errs.iter().flatten().copied().collect();
            let n = study.runs as f64;
            let hits = accuracy_from_errors(&answered, thresholds);
            CoverageRow {
                gate: if gate <= 0.0 { "any".into() } else { key(gate) },
                runs: study.runs,
                answered: answered.len() as f64 / n,
                accuracy: thresholds
                    .iter()
                    .zip(hits)
                    .map(|(&t, h)| (key(t), h * answered.len() as f64 / n))
                    .collect(),
            }
        })
        .collect())
}

/// Writes the per-query table for external plotting.
#[cfg(feature = "io")]
pub fn write_per_query_csv(path: impl AsRef<std::path::Path>, report: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for q in &report.per_query {
        w.serialize(q)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::dataset::{synthetic_pairs, SyntheticPairSpec};

    fn spec() -> SyntheticPairSpec {
        SyntheticPairSpec {
            world: WorldSpec {
                seed: 5,
                ..Default::default()
            },
            train_count: 0,
            test_count: 12,
            polar: PolarConfig {
                tile: TileConfig::default(),
                width: 128,
                height: 32,
            },
            pixel_noise: 0.0,
            ..Default::default()
        }
    }

    fn no_study() -> BenchmarkConfig {
        BenchmarkConfig {
            coverage: CoverageStudy {
                runs: 0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn handcrafted_noise_free_recall_is_perfect() {
        let pairs = synthetic_pairs(&spec()).unwrap();
        let report = run_benchmark(&pairs, &HandcraftedExtractor::default(), &no_study()).unwrap();
        assert_eq!(report.recall_at["1"], 1.0);
        assert_eq!(report.per_query.len(), 12);
        let r: Vec<f64> = ["1", "5", "10"].iter().map(|k| report.recall_at[*k]).collect();
        assert!(r.windows(2).all(|w| w[0] <= w[1]));
        assert!(report.orientation_accuracy.values().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn empty_test_split_rejected() {
        let pairs = synthetic_pairs(&SyntheticPairSpec {
            train_count: 2,
            test_count: 0,
            ..spec()
        })
        .unwrap();
        assert!(matches!(
            run_benchmark(&pairs, &HandcraftedExtractor::default(), &no_study()),
            Err(Error::EmptySet)
        ));
    }

    #[test]
    fn coverage_rows_follow_gates() {
        let study = CoverageStudy {
            runs: 2,
            trajectory: TrajectorySpec {
                polar: PolarConfig {
                    tile: TileConfig::default(),
                    width: 720,
                    height: 32,
                },
                motion: Motion::Sweep {
                    start_heading: 0.0,
                    sweep_degrees: 180.0,
                    duration_seconds: 4.0,
                },
                ..Default::default()
            },
            ..Default::default()
        };
        let rows = coverage_table(&study, &[2.0, 12.0]).unwrap();
        let gates: Vec<&str> = rows.iter().map(|r| r.gate.as_str()).collect();
        assert_eq!(gates, vec!["any", "120", "180"]);
        for r in &rows {
            assert!(r.accuracy["2"] <= r.accuracy["12"]);
            assert!(r.accuracy["12"] <= r.answered);
        }
    }

    #[test]
    fn report_json_is_stable() {
        let pairs = synthetic_pairs(&spec()).unwrap();
        let a = run_benchmark(&pairs, &HandcraftedExtractor::default(), &no_study()).unwrap();
        let b = run_benchmark(&pairs, &HandcraftedExtractor::default(), &no_study()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }
}
