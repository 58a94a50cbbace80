//! TOML application config with env-var overrides for the VLM endpoint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::DropoutConfig;
use crate::grounding::VlmEndpoint;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct GuidanceSection {
    pub scale: f64,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection { scale: 4.0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SamplerSection {
    pub steps: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { steps: 25 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct CacheSection {
    pub dir: Option<PathBuf>,
}

/// Top-level config file. Every section is optional and defaults to the
/// standard values (p_vae 0.5, p_text 0.1, guidance scale 4.0, 25 steps).
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct AppConfig {
    #[serde(default)]
    pub dropout: DropoutConfig,
    #[serde(default)]
    pub cfg: GuidanceSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub vlm: Option<VlmEndpoint>,
    #[serde(default)]
    pub cache: CacheSection,
}

impl AppConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<AppConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }

    /// Loads the config when a path is given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<AppConfig, ConfigError> {
        match path {
            Some(p) => AppConfig::load(p),
            None => Ok(AppConfig::default()),
        }
    }

    /// The VLM endpoint with `CAG_VLM_*` environment overrides applied.
    pub fn vlm_endpoint(&self) -> Option<VlmEndpoint> {
        let base = self.vlm.clone().unwrap_or(VlmEndpoint {
            base_url: std::env::var("CAG_VLM_URL").ok()?,
            model: String::new(),
            api_key: None,
            timeout_secs: 60,
        });
        Some(base.with_env_overrides())
    }
}
