//! Single-document run configuration.
//!
//! Every section and field is optional; anything missing takes its default and
//! unknown keys are rejected with the dotted path of the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augmentation::AugConfig;
use crate::contrastive::ContrastiveConfig;
use crate::dataset::SyntheticSpec;
use crate::error::{ClimError, Result};
use crate::evaluation::ProbeConfig;
use crate::neighborhood::NeighborhoodConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Tensor file or directory of P6 images; the CLI `--data` flag wins.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub augment: AugConfig,
    pub contrastive: ContrastiveConfig,
    pub neighborhood: NeighborhoodConfig,
    pub train: TrainConfig,
    pub eval: ProbeConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            ClimError::Config {
                key: if key == "." { "<root>".into() } else { key },
                reason: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ClimError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synthetic.validate()?;
        self.eval.validate()?;
        self.train_config().validate()
    }

    /// Training configuration with the shared sections filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            augment: self.augment.clone(),
            contrastive: self.contrastive.clone(),
            neighborhood: self.neighborhood.clone(),
            ..self.train.clone()
        }
    }
}
