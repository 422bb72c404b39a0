//! Application configuration: one JSON document covering model, schedule,
//! training and data source. Unknown keys are rejected everywhere so typos
//! surface as errors instead of silently falling back to defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, Dataset, DatasetError};
use crate::denoiser::DenoiserConfig;
use crate::schedule::ScheduleConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where training images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Deterministic generated corpus of paintings and objects.
    Procedural { seed: u64, n: usize },
    /// Directory of PNG/PPM images.
    Dir { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Procedural { seed: 0, n: 64 }
    }
}

/// Top-level config document for a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    /// Base seed for initialization and the sample stream.
    pub seed: u64,
    /// Output directory for checkpoint and metrics.
    pub out_dir: PathBuf,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            model: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            data: DataSource::default(),
            seed: 0,
            out_dir: PathBuf::from("runs/out"),
        }
    }
}

impl AppConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.schedule.validate().map_err(ConfigError::Invalid)?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let DataSource::Procedural { n, .. } = self.data {
            if n == 0 {
                return Err(ConfigError::Invalid("procedural corpus needs n >= 1".into()));
            }
        }
        Ok(())
    }

    /// Materialize the configured data source at the model resolution.
    pub fn load_data(&self) -> Result<Dataset, DatasetError> {
        match &self.data {
            DataSource::Procedural { seed, n } => {
                Ok(dataset::procedural_corpus(*seed, *n, self.model.resolution))
            }
            DataSource::Dir { path } => dataset::load_dir(path, self.model.resolution),
        }
    }
}

/// Parse and validate a config file.
pub fn load_config(path: &Path) -> Result<AppConfig, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let cfg: AppConfig = serde_json::from_str(&text)
        .map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = AppConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: AppConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        back.validate().unwrap();
    }

    #[test]
    fn empty_document_uses_defaults() {
        let cfg: AppConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, AppConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in [
            r#"{"coffee": 1}"#,
            r#"{"model": {"coffee": 1}}"#,
            r#"{"schedule": {"coffee": 1}}"#,
            r#"{"train": {"coffee": 1}}"#,
            r#"{"data": {"kind": "procedural", "seed": 0, "n": 4, "coffee": 1}}"#,
        ] {
            assert!(serde_json::from_str::<AppConfig>(doc).is_err(), "accepted: {doc}");
        }
    }

    #[test]
    fn data_source_variants_parse() {
        let p: AppConfig =
            serde_json::from_str(r#"{"data": {"kind": "procedural", "seed": 7, "n": 12}}"#)
                .unwrap();
        assert_eq!(p.data, DataSource::Procedural { seed: 7, n: 12 });
        let d: AppConfig =
            serde_json::from_str(r#"{"data": {"kind": "dir", "path": "/tmp/imgs"}}"#).unwrap();
        assert_eq!(d.data, DataSource::Dir { path: PathBuf::from("/tmp/imgs") });
    }

    #[test]
    fn invalid_sections_fail_validation() {
        let mut cfg = AppConfig::default();
        cfg.schedule.t_steps = 0;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));

        let mut cfg = AppConfig::default();
        cfg.data = DataSource::Procedural { seed: 0, n: 0 };
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn load_config_reports_missing_file_with_path() {
        let err = load_config(Path::new("/nonexistent/cfg.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/cfg.json"));
    }

    #[test]
    fn procedural_source_materializes_at_model_resolution() {
        let cfg: AppConfig = serde_json::from_str(
            r#"{"model": {"resolution": 16, "patch_size": 4, "base_channels": 8,
                 "levels": 2, "attn_levels": [1], "embed_dim": 8},
                "data": {"kind": "procedural", "seed": 1, "n": 3}}"#,
        )
        .unwrap();
        let data = cfg.load_data().unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(data.resolution, 16);
    }
}
