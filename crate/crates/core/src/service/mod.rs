//! HTTP service, configuration and on-disk store.

mod http;
pub mod store;

pub use http::{build_app, router, AppState, Envelope, SCHEMA_VERSION};

use std::collections::{BTreeMap, HashSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::DatasetId;
use crate::mechanisms::MechanismConfig;
use crate::translation::SimulationSettings;
use crate::workflow::Role;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServiceError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("no datasets registered")]
    NoDatasets,
    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        ServiceError::Io(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenConfig {
    pub token: String,
    pub role: Role,
    /// Identity recorded in histories and used for project ownership.
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub data_dir: PathBuf,
    #[serde(default = "yes")]
    pub disclose_epsilon: bool,
    /// Execute immediately when a reviewer approves.
    #[serde(default)]
    pub auto_execute: bool,
    #[serde(default)]
    pub advisory_thresholds: BTreeMap<DatasetId, f64>,
    #[serde(default = "default_threshold")]
    pub default_advisory_threshold: Option<f64>,
    #[serde(default)]
    pub translation: SimulationSettings,
    #[serde(default)]
    pub mechanism: MechanismConfig,
    #[serde(default)]
    pub tokens: Vec<TokenConfig>,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn yes() -> bool {
    true
}

fn default_threshold() -> Option<f64> {
    Some(1.0)
}

impl Config {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Config {
            listen: default_listen(),
            data_dir: data_dir.into(),
            disclose_epsilon: true,
            auto_execute: false,
            advisory_thresholds: BTreeMap::new(),
            default_advisory_threshold: default_threshold(),
            translation: SimulationSettings::default(),
            mechanism: MechanismConfig::default(),
            tokens: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        let config: Config = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn with_token(mut self, token: &str, role: Role, name: &str) -> Self {
        self.tokens.push(TokenConfig { token: token.into(), role, name: name.into() });
        self
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        self.listen
            .parse::<SocketAddr>()
            .map_err(|e| ServiceError::Config(format!("listen address `{}`: {e}", self.listen)))?;
        for (id, t) in &self.advisory_thresholds {
            if !(*t > 0.0 && t.is_finite()) {
                return Err(ServiceError::Config(format!("advisory threshold for `{id}` must be positive")));
            }
        }
        if let Some(t) = self.default_advisory_threshold {
            if !(t > 0.0 && t.is_finite()) {
                return Err(ServiceError::Config("default advisory threshold must be positive".into()));
            }
        }
        self.translation.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        self.mechanism.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        let mut seen = HashSet::new();
        for t in &self.tokens {
            if t.token.len() < 8 {
                return Err(ServiceError::Config(format!("token for `{}` is too short", t.name)));
            }
            if !seen.insert(&t.token) {
                return Err(ServiceError::Config("tokens must be distinct".into()));
            }
        }
        Ok(())
    }
}

/// Runs the server until ctrl-c.
pub async fn serve(config: Config) -> Result<(), ServiceError> {
    config.validate()?;
    let (app, state) = build_app(config.clone())?;
    if state.dataset_count() == 0 {
        return Err(ServiceError::NoDatasets);
    }
    let listener = tokio::net::TcpListener::bind(&config.listen)
        .await
        .map_err(|e| ServiceError::Io(format!("cannot bind {}: {e}", config.listen)))?;
    tracing::info!(listen = %config.listen, "serving");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServiceError::Io(e.to_string()))
}
