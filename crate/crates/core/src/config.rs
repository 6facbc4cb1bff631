//! Run configuration, loaded from TOML. Every field has a default and any
//! subset may be given in the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::AdaptConfig;
use crate::executor::ExecConfig;
use crate::grounding::GroundingConfig;
use crate::reasoner::{Reasoner, RemoteConfig, RemoteReasoner, ScriptedReasoner};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Scripted,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasonerSettings {
    pub backend: Backend,
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub max_in_flight: usize,
    pub timeout_s: u64,
}

impl Default for ReasonerSettings {
    fn default() -> Self {
        Self {
            backend: Backend::Scripted,
            base_url: "http://localhost:8000/v1".into(),
            model: "default".into(),
            token_env: "REASONER_TOKEN".into(),
            max_in_flight: 4,
            timeout_s: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub demos: usize,
    pub seeds: usize,
    pub demo_seed_base: u64,
    pub grasp_miss_rate: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { demos: 5, seeds: 10, demo_seed_base: 1000, grasp_miss_rate: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub bank_root: PathBuf,
    pub grounding: GroundingConfig,
    pub adapt: AdaptConfig,
    pub exec: ExecConfig,
    pub reasoner: ReasonerSettings,
    pub evaluation: EvalSettings,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            bank_root: PathBuf::from("bank"),
            grounding: GroundingConfig::default(),
            adapt: AdaptConfig::default(),
            exec: ExecConfig::default(),
            reasoner: ReasonerSettings::default(),
            evaluation: EvalSettings::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let g = &self.grounding;
        let a = &self.adapt;
        let checks = [
            (g.epsilon > 0.0 && g.gamma > 0.0, "grounding epsilon and gamma must be positive"),
            (a.max_iterations >= 1, "adapt.max_iterations must be at least 1"),
            (a.grid_m >= 2 && a.grid_m <= 26 && a.grid_n >= 2, "grid needs 2 <= m <= 26 and n >= 2"),
            (a.samples >= 1, "adapt.samples must be at least 1"),
            (self.exec.n_candidates >= 1, "exec.n_candidates must be at least 1"),
            ((0.0..=1.0).contains(&self.exec.grasp_miss_rate), "exec.grasp_miss_rate must be in [0, 1]"),
            (self.evaluation.demos >= 1 && self.evaluation.seeds >= 1, "evaluation needs demos and seeds >= 1"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(ConfigError::Invalid(msg.to_string())),
            None => Ok(()),
        }
    }

    pub fn build_reasoner(&self) -> Result<Box<dyn Reasoner>, ConfigError> {
        match self.reasoner.backend {
            Backend::Scripted => Ok(Box::new(ScriptedReasoner::new())),
            Backend::Remote => {
                let r = &self.reasoner;
                let cfg = RemoteConfig {
                    token: std::env::var(&r.token_env).ok(),
                    max_in_flight: r.max_in_flight,
                    timeout_s: r.timeout_s,
                    ..RemoteConfig::new(r.base_url.clone(), r.model.clone())
                };
                Ok(Box::new(RemoteReasoner::new(cfg)))
            }
        }
    }
}
