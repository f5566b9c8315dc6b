//! Service configuration: JSON file plus environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use propaseg_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// One subdirectory per model id holding `backbone.ckpt` and optionally
    /// `fusion.ckpt`.
    pub model_dir: PathBuf,
    /// One subdirectory per session.
    pub store_dir: PathBuf,
    /// Edits running longer than this answer with a pending job.
    pub timeout_secs: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            model_dir: PathBuf::from("models"),
            store_dir: PathBuf::from("sessions"),
            timeout_secs: 120.0,
        }
    }
}

pub const ENV_HOST: &str = "PROPASEG_HOST";
pub const ENV_PORT: &str = "PROPASEG_PORT";
pub const ENV_MODEL_DIR: &str = "PROPASEG_MODEL_DIR";
pub const ENV_STORE_DIR: &str = "PROPASEG_STORE_DIR";
pub const ENV_TIMEOUT: &str = "PROPASEG_TIMEOUT_SECS";

impl ServiceConfig {
    /// Read `path` if given, then apply `PROPASEG_*` variables from `env`.
    pub fn load<F>(path: Option<&Path>, env: F) -> Result<Self>
    where
        F: Fn(&str) -> Option<String>,
    {
        let mut cfg = match path {
            Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
            None => Self::default(),
        };
        if let Some(v) = env(ENV_HOST) {
            cfg.host = v;
        }
        if let Some(v) = env(ENV_PORT) {
            cfg.port = v
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_PORT}={v:?} is not a port")))?;
        }
        if let Some(v) = env(ENV_MODEL_DIR) {
            cfg.model_dir = v.into();
        }
        if let Some(v) = env(ENV_STORE_DIR) {
            cfg.store_dir = v.into();
        }
        if let Some(v) = env(ENV_TIMEOUT) {
            cfg.timeout_secs = v
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_TIMEOUT}={v:?} is not a number")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`ServiceConfig::load`] against the process environment.
    pub fn from_env(path: Option<&Path>) -> Result<Self> {
        Self::load(path, |k| std::env::var(k).ok())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::Config(format!("timeout {} must be positive", self.timeout_secs)));
        }
        Ok(())
    }
}
