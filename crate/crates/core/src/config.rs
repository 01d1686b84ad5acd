//! Single declarative run configuration covering every stage.
//!
//! Every section and field has a default, so a file only needs the values it
//! changes. JSON is the on-disk format.

use crate::eval::{BenchmarkConfig, OptimizerConfig, SyntheticPairSpec};
use crate::features::{HandcraftedExtractor, NetworkConfig};
use crate::fusion::FusionConfig;
use crate::geometry::PolarConfig;
use crate::objective::LossConfig;
use crate::search::SearchConfig;
use crate::sequencer::SequencerConfig;
use crate::synth::{TrajectorySpec, WorldSpec};
use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    #[default]
    Handcrafted,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub trajectory: TrajectorySpec,
    /// Polar sampling used by `coldstart` and `stream` references.
    pub polar: PolarConfig,
    pub sequencer: SequencerConfig,
    pub search: SearchConfig,
    pub fusion: FusionConfig,
    pub extractor: ExtractorKind,
    pub handcrafted: HandcraftedExtractor,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub dataset: SyntheticPairSpec,
    pub benchmark: BenchmarkConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.sequencer.validate()?;
        self.search.validate()?;
        self.network.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        Ok(())
    }
}
