//! Declarative TOML configuration for the service and CLI drivers.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use guardrail_core::consensus::WeightSchedule;
use guardrail_core::gateway::{BackendKind, BackendSpec, Gateway, MockEngine, Role};
use guardrail_core::policy::{parse_policy, Policy, PolicyError};
use guardrail_core::prompt::Mode;
use guardrail_core::refine::StopCriteria;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config at {path:?}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config does not parse: {0}")]
    Malformed(#[from] toml::de::Error),
    #[error("config needs at least one backend with role \"guardrail\"")]
    NoGuardrailBackend,
    #[error("remote backend {0:?} needs an endpoint_url")]
    MissingEndpoint(String),
    #[error("active policy at {path:?} is unusable: {source}")]
    BadPolicy {
        path: PathBuf,
        #[source]
        source: PolicyError,
    },
    #[error("cannot read policy file {path:?}")]
    PolicyUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Gateway(#[from] guardrail_core::gateway::GatewayError),
}

fn default_listen() -> String {
    "127.0.0.1:8080".to_string()
}

fn default_mode() -> String {
    "comprehension".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub name: String,
    /// "mock" or "remote"
    pub kind: String,
    /// "guardrail", "peer", "analyzer", or "judge"
    pub role: String,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub max_retries: u32,
}

fn default_timeout_secs() -> u64 {
    30
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsensusConfig {
    pub w: f64,
    pub threshold: f64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self { w: 0.1, threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub min_removed_fraction: f64,
    pub min_accuracy_delta: f64,
    pub max_iterations: u32,
    #[serde(default)]
    pub trainer_hook: Option<String>,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        let defaults = StopCriteria::default();
        Self {
            min_removed_fraction: defaults.min_removed_fraction,
            min_accuracy_delta: defaults.min_accuracy_delta,
            max_iterations: defaults.max_iterations,
            trainer_hook: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IclConfig {
    pub default_n: usize,
    pub format_kind: String,
}

impl Default for IclConfig {
    fn default() -> Self {
        Self { default_n: 4, format_kind: "json_detailed".to_string() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen_address: String,
    #[serde(default = "default_mode")]
    pub mode_default: String,
    pub active_policy_path: PathBuf,
    pub backends: Vec<BackendConfig>,
    #[serde(default)]
    pub consensus: ConsensusConfig,
    #[serde(default)]
    pub refinement: RefinementConfig,
    #[serde(default)]
    pub icl: IclConfig,
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Unreadable { path: path.to_path_buf(), source })?;
        let config: ServiceConfig = toml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.backends.iter().any(|b| b.role == "guardrail") {
            return Err(ConfigError::NoGuardrailBackend);
        }
        for b in &self.backends {
            if b.kind == "remote" && b.endpoint_url.is_none() {
                return Err(ConfigError::MissingEndpoint(b.name.clone()));
            }
        }
        Ok(())
    }

    pub fn default_mode(&self) -> Mode {
        match self.mode_default.as_str() {
            "classification" => Mode::Classification,
            _ => Mode::Comprehension,
        }
    }

    pub fn load_policy(&self) -> Result<Policy, ConfigError> {
        let text = std::fs::read_to_string(&self.active_policy_path).map_err(|source| {
            ConfigError::PolicyUnreadable { path: self.active_policy_path.clone(), source }
        })?;
        parse_policy(&text, None)
            .map_err(|source| ConfigError::BadPolicy { path: self.active_policy_path.clone(), source })
    }

    pub fn schedule(&self) -> WeightSchedule {
        let peers = self.backends.iter().filter(|b| b.role == "peer").count().max(1);
        WeightSchedule::new(self.consensus.w, peers)
    }

    pub fn stop_criteria(&self) -> StopCriteria {
        StopCriteria {
            min_removed_fraction: self.refinement.min_removed_fraction,
            min_accuracy_delta: self.refinement.min_accuracy_delta,
            max_iterations: self.refinement.max_iterations,
        }
    }

    /// Name of the configured guardrail backend.
    pub fn guardrail_backend(&self) -> &str {
        self.backends
            .iter()
            .find(|b| b.role == "guardrail")
            .map(|b| b.name.as_str())
            .expect("validated config has a guardrail backend")
    }

    pub fn peer_backends(&self) -> Vec<String> {
        self.backends
            .iter()
            .filter(|b| b.role == "peer")
            .map(|b| b.name.clone())
            .collect()
    }

    fn role_of(raw: &str) -> Role {
        match raw {
            "peer" => Role::Peer,
            "analyzer" => Role::Analyzer,
            "judge" => Role::Judge,
            _ => Role::Guardrail,
        }
    }

    /// Builds the gateway: mock backends answer from the given policy.
    pub fn build_gateway(&self, policy: &Policy) -> Result<Gateway, ConfigError> {
        let mut gateway = Gateway::new();
        for b in &self.backends {
            let role = Self::role_of(&b.role);
            if b.kind == "remote" {
                let mut spec = BackendSpec::remote(
                    b.name.clone(),
                    b.endpoint_url.clone().ok_or_else(|| ConfigError::MissingEndpoint(b.name.clone()))?,
                    role,
                );
                spec.timeout = Duration::from_secs(b.timeout_secs);
                spec.max_retries = b.max_retries;
                gateway.add_remote(spec)?;
            } else {
                let mut spec = BackendSpec::mock(b.name.clone(), role);
                spec.kind = BackendKind::Mock;
                spec.timeout = Duration::from_secs(b.timeout_secs);
                gateway.add_mock(spec, MockEngine::new(policy.clone()));
            }
        }
        Ok(gateway)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
active_policy_path = "policy.txt"

[[backends]]
name = "mock-guardrail"
kind = "mock"
role = "guardrail"
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let config: ServiceConfig = toml::from_str(MINIMAL).unwrap();
        config.validate().unwrap();
        assert_eq!(config.listen_address, "127.0.0.1:8080");
        assert_eq!(config.default_mode(), Mode::Comprehension);
        assert_eq!(config.consensus.threshold, 0.5);
        assert_eq!(config.refinement.max_iterations, 6);
        assert_eq!(config.guardrail_backend(), "mock-guardrail");
    }

    #[test]
    fn guardrail_backend_is_required() {
        let text = MINIMAL.replace("guardrail", "peer");
        let config: ServiceConfig = toml::from_str(&text).unwrap();
        assert!(matches!(config.validate(), Err(ConfigError::NoGuardrailBackend)));
    }

    #[test]
    fn remote_needs_endpoint() {
        let text = MINIMAL.replace("\"mock\"", "\"remote\"");
        let config: ServiceConfig = toml::from_str(&text).unwrap();
        assert!(matches!(config.validate(), Err(ConfigError::MissingEndpoint(_))));
    }
}
