//! TOML training configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::aam::AamParams;
use super::batch::BatchSpec;
use super::optim::OptimizerSpec;
use super::schedule::ScheduleSpec;
use super::synth::SyntheticSpec;
use crate::arch::ModelConfig;
use crate::audio::AugmentConfig;
use crate::error::{Error, Result};

/// Where training utterances come from: a manifest whose records carry WAV
/// paths, or generated speakers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_steps: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub aam: AamParams,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub batch: BatchSpec,
    pub optimizer: OptimizerSpec,
    pub augment: Option<AugmentConfig>,
    pub data: DataSpec,
}

fn in_section(section: &str, e: Error) -> Error {
    Error::Config(format!("{section}: {e}"))
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        self.model.validate().map_err(|e| in_section("model", e))?;
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.aam.margin) {
            return Err(Error::Config(format!(
                "aam.margin {} outside [0, pi/2)",
                self.aam.margin
            )));
        }
        if !(self.aam.scale > 0.0) || !self.aam.scale.is_finite() {
            return Err(Error::Config(format!("aam.scale {} must be positive", self.aam.scale)));
        }
        self.schedule.validate().map_err(|e| in_section("schedule", e))?;
        self.batch.validate().map_err(|e| in_section("batch", e))?;
        self.optimizer.validate().map_err(|e| in_section("optimizer", e))?;
        if let Some(a) = &self.augment {
            if !(0.0..=1.0).contains(&a.probability) {
                return Err(Error::Config("augment.probability must lie in [0, 1]".into()));
            }
            if a.kinds.is_empty() && a.probability > 0.0 {
                return Err(Error::Config("augment.kinds is empty".into()));
            }
            if !(a.snr_db.0 <= a.snr_db.1) {
                return Err(Error::Config("augment.snr_db must be an ordered pair".into()));
            }
        }
        match (&self.data.manifest, &self.data.synthetic) {
            (Some(_), None) => Ok(()),
            (None, Some(s)) => s.validate().map_err(|e| in_section("data.synthetic", e)),
            _ => Err(Error::Config(
                "data: set exactly one of `manifest` or `synthetic`".into(),
            )),
        }
    }
}
