//! Simulator input.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::breaker::BreakerParams;
use crate::registry::{DEFAULT_CACHE_TTL_MS, DEFAULT_HEARTBEAT_MS, DEFAULT_TTL_MS};
use crate::time::DurationMs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Plain calls: no breaker and no call timeout.
    NoBreaker,
    /// Each caller keeps a breaker per service it calls.
    ClientSide,
    /// Each service keeps one breaker in front of itself.
    ServiceSide,
    /// A shared proxy keeps a breaker per caller and per service.
    Proxy,
    /// Clients call named APIs on a gateway, which gates like the proxy.
    Gateway,
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::NoBreaker => "no_breaker",
            Topology::ClientSide => "client_side",
            Topology::ServiceSide => "service_side",
            Topology::Proxy => "proxy",
            Topology::Gateway => "gateway",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    /// Answer after the base latency with a backend fault.
    FaultReply,
    /// Never answer.
    Hang,
}

/// During `[from_ms, to_ms)` each request fails with `probability`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureInterval {
    pub from_ms: u64,
    pub to_ms: u64,
    pub probability: f64,
    pub mode: FailureMode,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    #[serde(default = "one")]
    pub instances: u32,
    pub base_latency_ms: DurationMs,
    /// Requests processed at once per instance; the rest wait in FIFO order.
    /// Unbounded when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<FailureInterval>,
    /// Service called once per request before answering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depends_on: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub id: String,
    /// Service name, or API name in the gateway topology.
    pub target: String,
    pub interval_ms: DurationMs,
    #[serde(default)]
    pub start_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_requests: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscoveryMode {
    /// Callers query the registry and cache the answer.
    ClientSide,
    /// A router queries the registry on every call.
    ServerSide,
}

fn default_ttl() -> DurationMs {
    DEFAULT_TTL_MS
}

fn default_heartbeat() -> DurationMs {
    DEFAULT_HEARTBEAT_MS
}

fn default_cache_ttl() -> DurationMs {
    DEFAULT_CACHE_TTL_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryOptions {
    pub discovery: DiscoveryMode,
    #[serde(default = "default_ttl")]
    pub ttl_ms: DurationMs,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_ms: DurationMs,
    #[serde(default = "default_cache_ttl")]
    pub cache_ttl_ms: DurationMs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    pub api: String,
    pub service: String,
    /// Deployment time; routes at 0 exist from the start.
    #[serde(default)]
    pub at_ms: u64,
}

fn default_sample_interval() -> DurationMs {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub duration_ms: DurationMs,
    pub topology: Topology,
    /// Falls back to the breaker defaults when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breaker: Option<BreakerParams>,
    pub services: Vec<ServiceSpec>,
    pub clients: Vec<ClientSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<RegistryOptions>,
    /// Gateway routes; only used by the gateway topology.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub routes: Vec<RouteSpec>,
    /// Spacing of queue-depth samples.
    #[serde(default = "default_sample_interval")]
    pub sample_interval_ms: DurationMs,
}

#[derive(Debug, Error, PartialEq)]
#[error("{path}: {message}")]
pub struct ScenarioError {
    pub path: String,
    pub message: String,
}

fn fail<T>(path: impl Into<String>, message: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError {
        path: path.into(),
        message: message.into(),
    })
}

impl Scenario {
    pub fn breaker_params(&self) -> BreakerParams {
        self.breaker.clone().unwrap_or_default()
    }

    pub fn service(&self, name: &str) -> Option<&ServiceSpec> {
        self.services.iter().find(|s| s.name == name)
    }

    /// Checks every reference and bound before anything runs.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.duration_ms == 0 {
            return fail("duration_ms", "must be > 0");
        }
        if self.sample_interval_ms == 0 {
            return fail("sample_interval_ms", "must be > 0");
        }
        if let Some(p) = &self.breaker {
            if let Err(e) = p.validate() {
                return fail(format!("breaker.{}", e.field), e.reason);
            }
        }
        if self.services.is_empty() {
            return fail("services", "at least one service is required");
        }
        let mut names = BTreeSet::new();
        for (i, s) in self.services.iter().enumerate() {
            let at = |f: &str| format!("services[{i}].{f}");
            if s.name.is_empty() {
                return fail(at("name"), "must not be empty");
            }
            if !names.insert(s.name.as_str()) {
                return fail(at("name"), format!("duplicate service `{}`", s.name));
            }
            if s.instances == 0 {
                return fail(at("instances"), "must be >= 1");
            }
            if s.capacity == Some(0) {
                return fail(at("capacity"), "must be >= 1");
            }
            let mut intervals: Vec<_> = s.failures.iter().collect();
            intervals.sort_by_key(|f| f.from_ms);
            for (j, f) in s.failures.iter().enumerate() {
                if f.from_ms >= f.to_ms {
                    return fail(at(&format!("failures[{j}]")), "from_ms must be < to_ms");
                }
                if !(0.0..=1.0).contains(&f.probability) {
                    return fail(
                        at(&format!("failures[{j}].probability")),
                        format!("must be in [0, 1], got {}", f.probability),
                    );
                }
            }
            if intervals.windows(2).any(|w| w[0].to_ms > w[1].from_ms) {
                return fail(at("failures"), "intervals overlap");
            }
        }
        for (i, s) in self.services.iter().enumerate() {
            if let Some(dep) = &s.depends_on {
                if !names.contains(dep.as_str()) {
                    return fail(
                        format!("services[{i}].depends_on"),
                        format!("unknown service `{dep}`"),
                    );
                }
            }
        }
        // a dependency cycle would recurse forever
        for s in &self.services {
            let mut seen = BTreeSet::new();
            let mut cur = Some(s.name.as_str());
            while let Some(name) = cur {
                if !seen.insert(name) {
                    return fail("services", format!("dependency cycle through `{name}`"));
                }
                cur = self.service(name).and_then(|x| x.depends_on.as_deref());
            }
        }

        let mut apis = BTreeMap::new();
        if self.topology == Topology::Gateway {
            for (i, r) in self.routes.iter().enumerate() {
                if !names.contains(r.service.as_str()) {
                    return fail(
                        format!("routes[{i}].service"),
                        format!("unknown service `{}`", r.service),
                    );
                }
                if r.api.starts_with(super::INTERNAL_API_PREFIX) {
                    return fail(
                        format!("routes[{i}].api"),
                        format!("`{}` is reserved for dependency calls", super::INTERNAL_API_PREFIX),
                    );
                }
                if apis.insert(r.api.as_str(), r.at_ms).is_some() {
                    return fail(format!("routes[{i}].api"), format!("duplicate api `{}`", r.api));
                }
            }
        } else if !self.routes.is_empty() {
            return fail("routes", "routes need the gateway topology");
        }

        let mut ids = BTreeSet::new();
        for (i, c) in self.clients.iter().enumerate() {
            let at = |f: &str| format!("clients[{i}].{f}");
            if c.id.is_empty() {
                return fail(at("id"), "must not be empty");
            }
            if names.contains(c.id.as_str()) {
                return fail(at("id"), format!("`{}` is also a service name", c.id));
            }
            if !ids.insert(c.id.as_str()) {
                return fail(at("id"), format!("duplicate client `{}`", c.id));
            }
            if c.interval_ms == 0 {
                return fail(at("interval_ms"), "must be > 0");
            }
            let known = if self.topology == Topology::Gateway {
                apis.contains_key(c.target.as_str())
            } else {
                names.contains(c.target.as_str())
            };
            if !known {
                return fail(at("target"), format!("unknown target `{}`", c.target));
            }
        }

        if let Some(r) = &self.registry {
            if r.ttl_ms == 0 || r.heartbeat_ms == 0 {
                return fail("registry", "ttl_ms and heartbeat_ms must be > 0");
            }
        }
        Ok(())
    }
}
