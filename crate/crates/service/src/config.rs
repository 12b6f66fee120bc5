use std::path::Path;

use arbor_core::orchestrator::EpisodeSettings;
use serde::{Deserialize, Serialize};

use crate::error::OpError;
use crate::store::StoreLimits;

/// Service configuration, read from one JSON file. Every field is optional.
///
/// Remote language-model tokens never live here: a remote backend names the
/// environment variable holding its token (`token_env`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Origins allowed by CORS. `["*"]` allows any origin.
    pub cors_origins: Vec<String>,
    /// When set, every endpoint except the health check requires this value
    /// in an `x-api-key` header or as a bearer token.
    pub api_key: Option<String>,
    pub max_body_bytes: usize,
    pub max_rows: usize,
    pub request_timeout_ms: u64,
    pub store: StoreLimits,
    /// Base episode settings; query bodies override them key by key.
    pub episode_defaults: EpisodeSettings,
    /// Where to write a JSON snapshot of the store on shutdown, and read it
    /// back on start.
    pub snapshot_path: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            cors_origins: vec!["http://localhost:5173".into()],
            api_key: None,
            max_body_bytes: 8 << 20,
            max_rows: 100_000,
            request_timeout_ms: 60_000,
            store: StoreLimits::default(),
            episode_defaults: EpisodeSettings::default(),
            snapshot_path: None,
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, OpError> {
        let text = std::fs::read_to_string(path).map_err(|e| OpError::io(&path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| OpError::bad_request("invalid_config", format!("{}: {e}", path.display())))
    }
}
