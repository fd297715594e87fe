//! The TOML run configuration. Every section is optional.

use std::path::Path;

use relscore_core::metrics::MetricConfig;
use relscore_core::pipeline::{GenerationConfig, DEFAULT_SUBSET_THRESHOLD};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubsetDefaults {
    pub threshold: f64,
    pub sample_size: usize,
}

impl Default for SubsetDefaults {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_SUBSET_THRESHOLD,
            sample_size: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointDefaults {
    pub url: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub retry_budget: u32,
}

impl Default for EndpointDefaults {
    fn default() -> Self {
        Self {
            url: None,
            timeout_secs: 60,
            max_in_flight: 4,
            retry_budget: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolConfig {
    pub seed: Option<u64>,
    pub metric: MetricConfig,
    pub generation: GenerationConfig,
    pub subset: SubsetDefaults,
    pub endpoint: EndpointDefaults,
}

impl ToolConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ToolConfig =
            toml::from_str(&text).map_err(|e| CliError::input(format!("config {}: {e}", path.display())))?;
        // a relative blocklist path is relative to the config file
        if let (Some(bl), Some(dir)) = (cfg.generation.blocklist_path.as_mut(), path.parent()) {
            if bl.is_relative() {
                *bl = dir.join(&*bl);
            }
        }
        Ok(cfg)
    }

    /// Stable digest of the effective configuration.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}
