use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ToolConfig;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

/// Provenance embedded in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_digest: String,
    /// The effective configuration, so the run can be repeated from the report.
    pub config: ToolConfig,
    pub inputs: Vec<InputDigest>,
    pub backend: Option<String>,
    pub seed: Option<u64>,
    /// RFC 3339, taken from `SOURCE_DATE_EPOCH` when set.
    pub created_at: String,
}

impl RunManifest {
    pub fn new(command: &str, config: &ToolConfig) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_digest: config.digest(),
            config: config.clone(),
            inputs: Vec::new(),
            backend: None,
            seed: None,
            created_at: timestamp(),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<(), CliError> {
        let bytes =
            std::fs::read(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
        self.inputs.push(InputDigest {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }
}

fn timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse::<i64>().ok());
    let at = match secs.and_then(|s| chrono::DateTime::from_timestamp(s, 0)) {
        Some(t) => t,
        None => chrono::Utc::now(),
    };
    at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[derive(Serialize)]
struct Envelope<'a, R: Serialize> {
    manifest: &'a RunManifest,
    report: &'a R,
}

/// Writes `{"manifest": ..., "report": ...}` as pretty JSON.
pub fn write_report<R: Serialize>(path: &Path, manifest: &RunManifest, report: &R) -> Result<(), CliError> {
    let mut body = serde_json::to_vec_pretty(&Envelope { manifest, report })
        .map_err(|e| CliError::Internal(format!("serialising report: {e}")))?;
    body.push(b'\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Internal(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(path, body).map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}
