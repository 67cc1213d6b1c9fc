//! Global configuration file for the command-line tool. Every field is
//! optional in the file; command-line flags override file values.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use prosody_core::audio::CANONICAL_RATE;
use prosody_core::model::{ModelConfig, TrainingConfig};
use prosody_core::pitch::{VoicingThresholds, DEFAULT_T_HIGH, DEFAULT_T_LOW};
use prosody_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoicingConfig {
    pub t_high: f64,
    pub t_low: f64,
}

impl Default for VoicingConfig {
    fn default() -> Self {
        Self {
            t_high: DEFAULT_T_HIGH,
            t_low: DEFAULT_T_LOW,
        }
    }
}

impl VoicingConfig {
    pub fn thresholds(&self) -> VoicingThresholds {
        VoicingThresholds {
            t_high: self.t_high,
            t_low: self.t_low,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub root: PathBuf,
    pub models: PathBuf,
    pub addr: SocketAddr,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            root: "projects".into(),
            models: "models".into(),
            addr: "127.0.0.1:8080".parse().unwrap(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    /// Must equal the engine's rate (16 kHz); inputs are resampled to it.
    pub canonical_rate: u32,
    pub voicing: VoicingConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub generation: GenerationConfig,
    pub serve: ServeConfig,
}

impl CliConfig {
    pub fn defaults() -> Self {
        Self {
            canonical_rate: CANONICAL_RATE,
            ..Default::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut c: CliConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        if c.canonical_rate == 0 {
            c.canonical_rate = CANONICAL_RATE;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.canonical_rate != CANONICAL_RATE {
            return Err(Error::Config(format!(
                "canonical_rate {} unsupported; the engine runs at {CANONICAL_RATE} Hz",
                self.canonical_rate
            )));
        }
        let v = &self.voicing;
        if !(0.0 <= v.t_low && v.t_low <= v.t_high && v.t_high <= 1.0) {
            return Err(Error::Config(format!("voicing thresholds low {} high {}", v.t_low, v.t_high)));
        }
        if !(self.generation.temperature > 0.0) {
            return Err(Error::Config("generation.temperature must be positive".into()));
        }
        self.model.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_fill_defaults_and_unknown_keys_fail() {
        let c = CliConfig::from_json(r#"{"training": {"batch_size": 4}}"#).unwrap();
        assert_eq!(c.training.batch_size, 4);
        assert_eq!(c.training.learning_rate, 1e-3);
        assert_eq!(c.canonical_rate, 16_000);
        assert!(CliConfig::from_json(r#"{"trainig": {}}"#).is_err());
        assert!(CliConfig::from_json(r#"{"canonical_rate": 22050}"#).is_err());
    }

    #[test]
    fn defaults_match_the_reference_training_setup() {
        let c = CliConfig::defaults();
        assert_eq!(c.training.batch_size, 32);
        assert_eq!(c.training.learning_rate, 1e-3);
        assert_eq!(c.training.epochs, 9);
    }
}
