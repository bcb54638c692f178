//! Model configuration and checkpoint files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::{check_encoder_shapes, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{read_tensor_file, write_tensor_file, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuningMode {
    /// Frozen message passing, trainable embeddings, adapters, optional context.
    Pin,
    /// Entire encoder frozen, no adapters, no context; only the head trains.
    Frozen,
}

impl std::str::FromStr for TuningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pin" => Ok(Self::Pin),
            "frozen" => Ok(Self::Frozen),
            _ => Err(Error::Config(format!(
                "unknown tuning mode `{s}` (expected pin or frozen)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub mode: TuningMode,
    pub d2: usize,
    pub context: bool,
    pub max_seen: usize,
    pub num_properties: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub run_config: Option<Value>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensor_file(path, &self.store, &self.config, self.run_config.as_ref())
    }

    /// Load and check every encoder tensor against the stored config.
    pub fn load(path: &Path) -> Result<Self> {
        let file = read_tensor_file(path)?;
        let config: ModelConfig = serde_json::from_value(file.config).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("bad config: {e}"),
        })?;
        config.encoder.validate()?;
        check_encoder_shapes(&file.store, &config.encoder)?;
        Ok(Self {
            config,
            store: file.store,
            run_config: file.run_config,
        })
    }

    /// Load, additionally requiring the tensors to fit `expected`.
    pub fn load_expecting(path: &Path, expected: &EncoderConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        check_encoder_shapes(&ckpt.store, expected)?;
        Ok(ckpt)
    }
}
