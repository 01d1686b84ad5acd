//! Cross-view geo-registration.
//!
//! Ground camera frames are matched against polar-transformed aerial reference
//! tiles. Each match yields a circular similarity vector over heading bins;
//! a sequence of those vectors, co-registered with odometry, gives a gated
//! absolute heading that can be fused back into a drifting navigation estimate.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`geometry`]: geo-referenced rasters, reference tile cropping, polar transform.
//! - [`features`]: feature maps and the two extractors (handcrafted, learned).
//! - [`alignment`]: sliding-window circular similarity and peak analysis.
//! - [`objective`]: orientation-weighted soft-margin triplet loss.
//! - [`sequencer`]: multi-frame heading estimation with coverage and ratio gates.
//! - [`search`]: joint location and heading search around a crude prior.
//! - [`fusion`]: scalar heading filter for odometry drift correction.
//! - [`synth`]: deterministic synthetic worlds, views and trajectories.
//! - [`eval`]: metrics, training loop, datasets and benchmarks.

pub mod alignment;
pub mod angle;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod image;
pub mod objective;
pub mod search;
pub mod sequencer;
pub mod synth;

pub use error::{Error, Result};
