//! Run configuration: one TOML file whose sections mirror the module configs.
//!
//! ```toml
//! rank_k = 3
//! workers = 4
//!
//! [preprocess]
//! interval = 900
//!
//! [anomaly]
//! target_channel = "energy"
//!
//! [window]
//! window_length = 24
//! lag_selection = "bic"
//!
//! [remote]
//! url = "http://localhost:8080/generate"
//!
//! [explain.aliases]
//! occ_z3 = "occupancy in Zone 3"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anomaly::AnomalyConfig;
use crate::explain::{ActionCatalog, RemoteConfig};
use crate::granger::WindowConfig;
use crate::graph::PruneConfig;
use crate::ingest::PreprocessConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config field `{path}`: {message}")]
    Invalid { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preprocess: PreprocessConfig,
    pub anomaly: AnomalyConfig,
    pub window: WindowConfig,
    pub prune: PruneConfig,
    pub rank_k: usize,
    pub remote: RemoteConfig,
    pub explain: ActionCatalog,
    /// Worker threads for per-anomaly processing; 0 picks the core count.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            anomaly: AnomalyConfig::default(),
            window: WindowConfig::default(),
            prune: PruneConfig::default(),
            rank_k: 3,
            remote: RemoteConfig::default(),
            explain: ActionCatalog::default(),
            workers: 0,
        }
    }
}

fn tagged(section: &str, r: Result<(), (&'static str, String)>) -> Result<(), ConfigError> {
    r.map_err(|(field, message)| ConfigError::Invalid { path: format!("{section}.{field}"), message })
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Reads `path` (defaults when `None`), applies the remote URL from the
    /// environment and validates.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError::Read { path: p.display().to_string(), message: e.to_string() })?;
                Self::from_toml_str(&text)?
            }
            None => Self::default(),
        };
        let cfg = Self { remote: cfg.remote.with_env(), ..cfg };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reports the first invalid field by its dotted path.
    pub fn validate(&self) -> Result<(), ConfigError> {
        tagged("preprocess", self.preprocess.validate())?;
        tagged("anomaly", self.anomaly.validate())?;
        tagged("window", self.window.validate())?;
        tagged("prune", self.prune.validate())?;
        if self.rank_k < 1 {
            return Err(ConfigError::Invalid { path: "rank_k".into(), message: "must be at least 1".into() });
        }
        tagged("remote", self.remote.validate())?;
        if let Some(rule) = self.explain.actions.iter().find(|r| r.pattern.is_empty()) {
            return Err(ConfigError::Invalid {
                path: "explain.actions".into(),
                message: format!("empty pattern for action `{}`", rule.action),
            });
        }
        Ok(())
    }
}
