//! TOML configuration.
//!
//! ```toml
//! [breaker]            # breaker defaults; omitted keys take the built-in defaults
//! call_timeout_ms = 20000
//!
//! [registry]
//! listen = "127.0.0.1:7400"
//! ttl_ms = 30000
//!
//! [gateway]
//! listen = "127.0.0.1:7500"
//! registry = "127.0.0.1:7400"   # resolves `service = ...` routes
//! [[gateway.routes]]
//! api = "ShopAPI"
//! target = "127.0.0.1:9000"
//!
//! [scenario]           # see `meshguard::sim::Scenario`
//! ```
//!
//! Every section is optional. Unknown keys are errors.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use meshguard::breaker::BreakerParams;
use meshguard::gateway::admin::DeployPayload;
use meshguard::gateway::DEFAULT_CLIENT_BREAKER_CAP;
use meshguard::registry::{DEFAULT_HEARTBEAT_MS, DEFAULT_TTL_MS};
use meshguard::sim::Scenario;
use meshguard::time::{DurationMs, Instant};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_REGISTRY_LISTEN: &str = "127.0.0.1:7400";
pub const DEFAULT_GATEWAY_LISTEN: &str = "127.0.0.1:7500";
pub const DEFAULT_PROXY_LISTEN: &str = "127.0.0.1:7600";

fn default_ttl() -> DurationMs {
    DEFAULT_TTL_MS
}

fn default_heartbeat() -> DurationMs {
    DEFAULT_HEARTBEAT_MS
}

fn default_client_cap() -> usize {
    DEFAULT_CLIENT_BREAKER_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listen: Option<String>,
    /// TTL given to registrations that don't carry their own.
    #[serde(default = "default_ttl")]
    pub ttl_ms: DurationMs,
    /// Advertised heartbeat period for instances.
    #[serde(default = "default_heartbeat")]
    pub heartbeat_ms: DurationMs,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            listen: None,
            ttl_ms: DEFAULT_TTL_MS,
            heartbeat_ms: DEFAULT_HEARTBEAT_MS,
        }
    }
}

/// Gateway settings; `proxy serve` reads the same section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listen: Option<String>,
    /// Registry address used to resolve routes that name a service.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<String>,
    #[serde(default = "default_client_cap")]
    pub client_breaker_cap: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub routes: Vec<DeployPayload>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            listen: None,
            registry: None,
            client_breaker_cap: DEFAULT_CLIENT_BREAKER_CAP,
            routes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breaker: Option<BreakerParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<RegistryConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gateway: Option<GatewayConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Syntax errors and unknown or mistyped keys; the message carries the
    /// line and column.
    #[error("{path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("{path}: `{field}`: {message}")]
    Invalid {
        path: PathBuf,
        field: String,
        message: String,
    },
}

/// Where a document came from, for error messages.
struct Origin<'a>(&'a Path);

impl Origin<'_> {
    fn invalid(&self, field: impl Into<String>, message: impl fmt::Display) -> ConfigError {
        ConfigError::Invalid {
            path: self.0.to_path_buf(),
            field: field.into(),
            message: message.to_string(),
        }
    }
}

fn check_breaker(o: &Origin, prefix: &str, p: &BreakerParams) -> Result<(), ConfigError> {
    p.validate()
        .map_err(|e| o.invalid(format!("{prefix}{}", e.field), e.reason))
}

impl ConfigDocument {
    pub fn breaker_params(&self) -> BreakerParams {
        self.breaker.clone().unwrap_or_default()
    }

    /// Fills in defaults: a breaker section is always present afterwards and
    /// a scenario without its own breaker inherits it.
    pub fn resolve(mut self) -> Self {
        let breaker = self.breaker_params();
        if let Some(s) = &mut self.scenario {
            s.breaker.get_or_insert_with(|| breaker.clone());
        }
        self.breaker = Some(breaker);
        self
    }

    fn validate(&self, o: &Origin) -> Result<(), ConfigError> {
        if let Some(p) = &self.breaker {
            check_breaker(o, "breaker.", p)?;
        }
        if let Some(r) = &self.registry {
            if r.ttl_ms == 0 {
                return Err(o.invalid("registry.ttl_ms", "must be > 0"));
            }
            if r.heartbeat_ms == 0 {
                return Err(o.invalid("registry.heartbeat_ms", "must be > 0"));
            }
        }
        if let Some(g) = &self.gateway {
            if g.client_breaker_cap == 0 {
                return Err(o.invalid("gateway.client_breaker_cap", "must be > 0"));
            }
            let mut seen = BTreeSet::new();
            for (i, route) in g.routes.iter().enumerate() {
                let field = format!("gateway.routes[{i}]");
                if let Some(p) = &route.breaker {
                    check_breaker(o, &format!("{field}.breaker."), p)?;
                }
                route
                    .clone()
                    .into_redirection(Instant::ZERO)
                    .map_err(|e| o.invalid(&field, e))?;
                if !seen.insert(route.api.as_str()) {
                    return Err(o.invalid(format!("{field}.api"), format!("duplicate api `{}`", route.api)));
                }
            }
        }
        if let Some(s) = &self.scenario {
            check_scenario(o, "scenario.", s)?;
        }
        Ok(())
    }
}

fn check_scenario(o: &Origin, prefix: &str, s: &Scenario) -> Result<(), ConfigError> {
    s.validate()
        .map_err(|e| o.invalid(format!("{prefix}{}", e.path), e.message))
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Syntax {
        path: path.to_path_buf(),
        message: e.to_string().trim_end().to_string(),
    })
}

/// Reads, resolves and validates a configuration document.
pub fn parse_config(path: &Path) -> Result<ConfigDocument, ConfigError> {
    parse_config_str(path, &read(path)?)
}

pub fn parse_config_str(path: &Path, text: &str) -> Result<ConfigDocument, ConfigError> {
    let doc: ConfigDocument = parse(path, text)?;
    let doc = doc.resolve();
    doc.validate(&Origin(path))?;
    Ok(doc)
}

/// Reads a file holding a scenario at top level, resolving a missing
/// breaker section to the defaults.
pub fn parse_scenario(path: &Path) -> Result<Scenario, ConfigError> {
    parse_scenario_str(path, &read(path)?)
}

pub fn parse_scenario_str(path: &Path, text: &str) -> Result<Scenario, ConfigError> {
    let mut s: Scenario = parse(path, text)?;
    s.breaker.get_or_insert_with(BreakerParams::default);
    check_scenario(&Origin(path), "", &s)?;
    Ok(s)
}

/// Renders a resolved document back to TOML.
pub fn print<T: Serialize>(doc: &T) -> Result<String, String> {
    toml::to_string(doc).map_err(|e| e.to_string())
}
