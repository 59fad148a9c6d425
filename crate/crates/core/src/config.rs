//! TOML run configuration shared by the command-line tools.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::predictor::PredictorConfig;
use crate::sampler::SamplerConfig;
use crate::schedule::ScheduleConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset tag written to metrics rows.
    pub name: String,
    /// Directory in the `A/`, `B/`, `label/`, `list/` layout. Without it the
    /// synthetic generator is used.
    pub root: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            root: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub method_tag: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            method_tag: "cadm".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub model: PredictorConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Cross-section consistency checks.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.schedule.build()?;
        if self.root_is_synthetic() {
            self.data.synthetic.validate()?;
            if self.data.synthetic.size != self.model.image_size {
                return Err(Error::Config(format!(
                    "synthetic size {} differs from model image_size {}",
                    self.data.synthetic.size, self.model.image_size
                )));
            }
        }
        if self.sampler.steps > self.schedule.steps {
            return Err(Error::Config(format!(
                "sampler steps {} exceed the {}-step schedule",
                self.sampler.steps, self.schedule.steps
            )));
        }
        Ok(())
    }

    fn root_is_synthetic(&self) -> bool {
        self.data.root.is_none()
    }
}
