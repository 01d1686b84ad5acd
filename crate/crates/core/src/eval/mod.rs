//! Datasets, metrics, training and benchmark tables.

pub mod benchmark;
pub mod dataset;
pub mod metrics;
pub mod training;

pub use benchmark::{run_benchmark, BenchmarkConfig, CoverageStudy, MetricsReport};
pub use dataset::{synthetic_pairs, PairedDataset, Split, SyntheticPair, SyntheticPairSpec};
pub use metrics::{orientation_accuracy, recall_at_k};
pub use training::{train, OptimizerConfig, TrainingPair, TrainingReport};
