//! Runtime configuration shared by every command.
//!
//! Configuration lives in one JSON file. Unknown keys are rejected and every
//! field has a default, so `{}` is a valid config. The path can come from a
//! flag or from the `EFIM_CONFIG` environment variable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{default_vocabulary, train_default_vocabulary};
use crate::sim::{CostModel, EngineConfig, Scheme};
use crate::tokenizer::{SpecialTokens, TokenizerError, Vocabulary};

pub const CONFIG_ENV: &str = "EFIM_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Answer from the in-process simulated engine.
    Sim,
    /// Forward rendered prompts to a completion endpoint.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub specials: SpecialTokens,
    pub block_size: usize,
    pub cache_capacity_tokens: usize,
    pub cost: CostModel,
    pub backend: BackendKind,
    /// Completion endpoint URL, required by the http backend.
    pub endpoint: Option<String>,
    /// Sessions kept by the gateway before idle ones are evicted.
    pub session_pool_limit: usize,
    pub seed: u64,
    /// Vocabulary JSON; the built-in code vocabulary when absent.
    pub vocab: Option<PathBuf>,
    /// Listen address of `serve`.
    pub bind: String,
}

impl Default for Config {
    fn default() -> Self {
        let engine = EngineConfig::default();
        Self {
            specials: SpecialTokens::default(),
            block_size: engine.block_size,
            cache_capacity_tokens: engine.cache_capacity_tokens,
            cost: engine.cost,
            backend: BackendKind::Sim,
            endpoint: None,
            session_pool_limit: 10_000,
            seed: 0,
            vocab: None,
            bind: "127.0.0.1:8080".into(),
        }
    }
}

impl Config {
    pub fn from_json(json: &str) -> Result<Self, ConfigError> {
        let config: Config = serde_json::from_str(json)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Loads `explicit` if given, else the file named by `EFIM_CONFIG`, else
    /// the defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(p),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.specials.validate()?;
        self.engine(Scheme::Efim)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.backend == BackendKind::Http {
            match &self.endpoint {
                Some(url) if url.starts_with("http://") || url.starts_with("https://") => {}
                Some(url) => return Err(ConfigError::Invalid(format!("endpoint {url:?} is not an http(s) URL"))),
                None => return Err(ConfigError::Invalid("http backend needs an endpoint".into())),
            }
        }
        if self.bind.trim().is_empty() {
            return Err(ConfigError::Invalid("bind address is empty".into()));
        }
        Ok(())
    }

    pub fn engine(&self, scheme: Scheme) -> EngineConfig {
        EngineConfig {
            block_size: self.block_size,
            cache_capacity_tokens: self.cache_capacity_tokens,
            cost: self.cost,
            scheme,
        }
    }

    /// The configured vocabulary. Its special tokens must match `specials`.
    pub fn vocabulary(&self) -> Result<Vocabulary, ConfigError> {
        let vocab = match &self.vocab {
            Some(path) => Vocabulary::load(path)?,
            None if self.specials == SpecialTokens::default() => default_vocabulary().clone(),
            None => train_default_vocabulary(self.specials.clone())?,
        };
        if vocab.specials() != &self.specials {
            return Err(ConfigError::Invalid("vocabulary special tokens differ from the configured ones".into()));
        }
        Ok(vocab)
    }
}
