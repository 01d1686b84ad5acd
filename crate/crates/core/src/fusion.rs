//! Scalar heading filter: odometry deltas predict, accepted absolute headings correct.

use crate::angle::{wrap_degrees, wrapped_difference};
use crate::sequencer::HeadingEstimate;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub initial_variance: f64,
    /// Degrees squared per second.
    pub process_noise_rate: f64,
    /// Degrees squared.
    pub measurement_variance: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            initial_variance: 25.0,
            process_noise_rate: 1.0,
            measurement_variance: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionState {
    pub heading: f64,
    pub variance: f64,
    pub process_noise_rate: f64,
    pub measurement_variance: f64,
}

impl FusionState {
    pub fn new(heading: f64, cfg: &FusionConfig) -> Result<Self> {
        if !(cfg.initial_variance > 0.0) || !(cfg.process_noise_rate >= 0.0) || !(cfg.measurement_variance >= 0.0) {
            return Err(Error::InvalidConfig("fusion variances out of range".into()));
        }
        if !heading.is_finite() {
            return Err(Error::InvalidConfig("non-finite initial heading".into()));
        }
        Ok(Self {
            heading: wrap_degrees(heading),
            variance: cfg.initial_variance,
            process_noise_rate: cfg.process_noise_rate,
            measurement_variance: cfg.measurement_variance,
        })
    }

    /// Dead-reckons through `delta` degrees over `dt` seconds.
    pub fn predict(&self, delta: f64, dt: f64) -> Result<Self> {
        if !(dt >= 0.0) || !delta.is_finite() {
            return Err(Error::InvalidConfig(format!("bad prediction step delta={delta} dt={dt}")));
        }
        Ok(Self {
            heading: wrap_degrees(self.heading + delta),
            variance: self.variance + self.process_noise_rate * dt,
            ..*self
        })
    }

    /// Applies an absolute heading measurement. Rejected estimates are ignored.
    pub fn correct(&self, m: &HeadingEstimate) -> Self {
        if !m.accepted {
            return *self;
        }
        self.correct_heading(m.heading_degrees)
    }

    pub fn correct_heading(&self, measurement: f64) -> Self {
        let denom = self.variance + self.measurement_variance;
        if !(denom > 0.0) || !measurement.is_finite() {
            return *self;
        }
        let gain = self.variance / denom;
        let innovation = wrapped_difference(measurement, self.heading);
        Self {
            heading: wrap_degrees(self.heading + gain * innovation),
            variance: self.variance * (1.0 - gain),
            ..*self
        }
    }
}
