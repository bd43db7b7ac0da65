//! Training/decoding configuration and its flat dotted-key file format.
//!
//! ```toml
//! learning_rate = 0.003
//! epochs = 20
//! gpo.sigma = 1.0
//! window.seq_len = 64
//! encoder.d_model = 32
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderConfig, EncoderError};
use crate::heads::{GpoConfig, HeadError, LossConfig};
use crate::tokenizer::DEFAULT_P_MAX;
use crate::windowing::{WindowConfig, WindowError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl From<EncoderError> for ConfigError {
    fn from(e: EncoderError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

impl From<WindowError> for ConfigError {
    fn from(e: WindowError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

impl From<HeadError> for ConfigError {
    fn from(e: HeadError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Master seed. Window subsampling, batch order and parameter init all
    /// derive from it; see [`TrainConfig::resolved`].
    pub seed: u64,
    pub papr_enabled: bool,
    pub gpo_enabled: bool,
    pub max_span_len: usize,
    /// Margin the best answer must beat the null score by. Off by default.
    pub null_threshold: Option<f64>,
    pub vocab_cap: usize,
    pub p_max: usize,
    pub gpo: GpoConfig,
    pub window: WindowConfig,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            epochs: 4,
            batch_size: 8,
            seed: 0,
            papr_enabled: true,
            gpo_enabled: true,
            max_span_len: 30,
            null_threshold: None,
            vocab_cap: 8192,
            p_max: DEFAULT_P_MAX,
            gpo: GpoConfig::default(),
            window: WindowConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Copies the master seed and the window length into the sub-configs.
    pub fn resolved(mut self) -> Self {
        self.window.seed = self.seed;
        self.encoder.seed = self.seed;
        self.encoder.max_len = self.window.seq_len;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(ConfigError::Invalid(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(ConfigError::Invalid("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be >= 1".into()));
        }
        if self.max_span_len == 0 {
            return Err(ConfigError::Invalid("max_span_len must be >= 1".into()));
        }
        self.gpo.validate()?;
        self.window.validate()?;
        self.encoder.validate()?;
        if self.encoder.max_len < self.window.seq_len {
            return Err(ConfigError::Invalid(format!(
                "encoder.max_len {} is shorter than window.seq_len {}",
                self.encoder.max_len, self.window.seq_len
            )));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { gpo: self.gpo.clone(), gpo_enabled: self.gpo_enabled, papr_enabled: self.papr_enabled }
    }
}
