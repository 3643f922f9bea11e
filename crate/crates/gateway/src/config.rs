use std::path::{Path, PathBuf};

use rapport_core::completion::HttpConfig;
use rapport_core::session::SessionConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid TOML config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid JSON config: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ListenerBackend {
    Llm,
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentimentChoice {
    Llm,
    Lexicon,
}

/// Service configuration. The API key is never read from here; `llm.api_key_env`
/// names the environment variable that holds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub listen: String,
    pub data_dir: PathBuf,
    /// Sessions that are not yet finished, across all clients.
    pub max_sessions: usize,
    /// Close a stream after this long without a client message.
    pub idle_timeout_ms: u64,
    /// Base for `ws_url` in create responses, e.g. `ws://example.org`.
    /// Defaults to the request's Host header.
    pub public_url: Option<String>,
    pub listener_backend: ListenerBackend,
    pub sentiment_backend: SentimentChoice,
    pub llm: HttpConfig,
    pub session: SessionConfig,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("data"),
            max_sessions: 64,
            idle_timeout_ms: 300_000,
            public_url: None,
            listener_backend: ListenerBackend::Mock,
            sentiment_backend: SentimentChoice::Lexicon,
            llm: HttpConfig::default(),
            session: SessionConfig::default(),
        }
    }
}

impl GatewayConfig {
    /// Loads TOML, or JSON when the file name ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text)?)
        } else {
            Ok(toml::from_str(&text)?)
        }
    }
}
