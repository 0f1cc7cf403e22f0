//! API gateway: named APIs redirected to services, each call gated by a
//! breaker for the calling client and one for the target service.
//!
//! A call is forwarded only when both breakers allow it, client first. Its
//! outcome is then recorded on both. A rejection by the service breaker
//! costs the client nothing.
//!
//! Routes can be added and removed while traffic flows. Each change is a
//! single write to the route table, and calls already admitted carry
//! everything they need to finish, so removing a route never strands them.

pub mod admin;
mod lru;
pub mod server;

pub use lru::{BreakerCache, DEFAULT_CLIENT_BREAKER_CAP};
pub use server::GatewayService;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::breaker::{BreakerParams, CircuitBreaker, DualGate, GateSide, Outcome, ParamError};
use crate::interceptor::{
    Admission, CallResult, Completion, Disposition, Forwarder, Interceptor, Location, PendingCall,
    TargetBinding,
};
use crate::model::{
    FaultInfo, FaultOrigin, MessageEnvelope, ALREADY_EXISTS, INVALID_REQUEST, NOT_FOUND,
    SERVICE_UNAVAILABLE,
};
use crate::registry::RegistryLookup;
use crate::time::{Clock, Instant};

/// Reserved API name of the control plane.
pub const ADMIN_API: &str = "_admin";
/// Client key used when a request carries no identity at all.
pub const ANONYMOUS_CLIENT: &str = "anonymous";

/// Where an API sends its traffic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteTarget {
    /// A fixed binding.
    Binding(TargetBinding),
    /// A service name resolved through the registry on every call.
    Service(String),
}

impl RouteTarget {
    /// Key of the service breaker guarding this target.
    pub fn service_key(&self) -> &str {
        match self {
            RouteTarget::Binding(b) => &b.service_name,
            RouteTarget::Service(name) => name,
        }
    }
}

impl fmt::Display for RouteTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RouteTarget::Binding(b) => write!(f, "{} at {}", b.service_name, b.location),
            RouteTarget::Service(name) => write!(f, "{name} via registry"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Redirection {
    pub api_name: String,
    pub target: RouteTarget,
    pub created_at: Instant,
    /// Overrides the gateway defaults for this route's service breaker.
    pub breaker: Option<BreakerParams>,
}

impl Redirection {
    pub fn new(api_name: impl Into<String>, target: RouteTarget, created_at: Instant) -> Self {
        Self {
            api_name: api_name.into(),
            target,
            created_at,
            breaker: None,
        }
    }

    /// Shortcut for an API pointing at a fixed address with any operation.
    pub fn to_location(
        api_name: impl Into<String>,
        service_name: impl Into<String>,
        location: Location,
        created_at: Instant,
    ) -> Self {
        Self::new(
            api_name,
            RouteTarget::Binding(TargetBinding::any(service_name, location)),
            created_at,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiListing {
    pub api: String,
    pub target: String,
    pub created_at: Instant,
}

#[derive(Debug, Error, PartialEq)]
pub enum GatewayError {
    #[error("api `{0}` is already deployed")]
    AlreadyExists(String),
    #[error("api `{0}` is not deployed")]
    NotFound(String),
    #[error("`{0}` is not a usable api name")]
    InvalidName(String),
    #[error(transparent)]
    InvalidParams(#[from] ParamError),
}

impl GatewayError {
    pub fn to_fault(&self) -> FaultInfo {
        let name = match self {
            GatewayError::AlreadyExists(_) => ALREADY_EXISTS,
            GatewayError::NotFound(_) => NOT_FOUND,
            GatewayError::InvalidName(_) | GatewayError::InvalidParams(_) => INVALID_REQUEST,
        };
        FaultInfo::backend(name, self.to_string())
    }
}

/// A call admitted by both breakers, waiting for its completion.
#[derive(Debug, Clone)]
pub struct Ticket {
    pub api: String,
    pub client: String,
    pub service: String,
    pub target: TargetBinding,
    pub pending: PendingCall,
    interceptor: Interceptor,
    service_params: BreakerParams,
}

// Forward is the common case; boxing it would cost an allocation per call.
#[allow(clippy::large_enum_variant)]
#[derive(Debug)]
pub enum GatewayAdmission {
    Forward(Ticket),
    Settled {
        result: CallResult,
        /// Which breaker refused, for fail-fast results.
        rejected_by: Option<GateSide>,
    },
}

fn unroutable(request: &MessageEnvelope, name: &str, detail: String) -> GatewayAdmission {
    GatewayAdmission::Settled {
        result: CallResult {
            envelope: request.fail(FaultInfo::new(name, detail, FaultOrigin::Transport)),
            latency_ms: 0,
            outcome: Outcome::Failure,
            disposition: Disposition::Invalid,
        },
        rejected_by: None,
    }
}

/// Registry stand-in for gateways without discovery.
pub struct NoDiscovery;

impl RegistryLookup for NoDiscovery {
    fn lookup(&self, _: &str, _: Instant) -> Vec<Location> {
        Vec::new()
    }
}

#[derive(Debug, Clone)]
pub struct Gateway {
    defaults: BreakerParams,
    routes: BTreeMap<String, Redirection>,
    clients: BreakerCache,
    services: BreakerCache,
    cursor: HashMap<String, usize>,
}

impl Gateway {
    pub fn new(defaults: BreakerParams) -> Self {
        Self::with_client_cap(defaults, DEFAULT_CLIENT_BREAKER_CAP)
    }

    pub fn with_client_cap(defaults: BreakerParams, client_cap: usize) -> Self {
        Self {
            defaults,
            routes: BTreeMap::new(),
            clients: BreakerCache::new(client_cap),
            services: BreakerCache::new(usize::MAX),
            cursor: HashMap::new(),
        }
    }

    pub fn defaults(&self) -> &BreakerParams {
        &self.defaults
    }

    pub fn deploy(&mut self, redirection: Redirection) -> Result<(), GatewayError> {
        let name = &redirection.api_name;
        if name.is_empty() || name == ADMIN_API || name.contains(char::is_whitespace) {
            return Err(GatewayError::InvalidName(name.clone()));
        }
        if let Some(p) = &redirection.breaker {
            p.validate()?;
        }
        if self.routes.contains_key(name) {
            return Err(GatewayError::AlreadyExists(name.clone()));
        }
        self.routes.insert(name.clone(), redirection);
        Ok(())
    }

    pub fn undeploy(&mut self, api_name: &str) -> Result<Redirection, GatewayError> {
        self.routes
            .remove(api_name)
            .ok_or_else(|| GatewayError::NotFound(api_name.to_string()))
    }

    pub fn route_for(&self, api_name: &str) -> Option<&Redirection> {
        self.routes.get(api_name)
    }

    /// Deployed APIs ordered by name.
    pub fn list(&self) -> Vec<ApiListing> {
        self.routes
            .values()
            .map(|r| ApiListing {
                api: r.api_name.clone(),
                target: r.target.to_string(),
                created_at: r.created_at,
            })
            .collect()
    }

    pub fn client_breaker(&self, client: &str) -> Option<&CircuitBreaker> {
        self.clients.get(client)
    }

    pub fn service_breaker(&self, service: &str) -> Option<&CircuitBreaker> {
        self.services.get(service)
    }

    pub fn client_breaker_mut(&mut self, client: &str) -> &mut CircuitBreaker {
        self.clients.get_or_create(client, &self.defaults)
    }

    pub fn service_breaker_mut(&mut self, service: &str) -> &mut CircuitBreaker {
        let params = self.params_for_service(service);
        self.services.get_or_create(service, &params)
    }

    pub fn client_breakers(&self) -> Vec<(&str, &CircuitBreaker)> {
        self.clients.iter_sorted()
    }

    pub fn service_breakers(&self) -> Vec<(&str, &CircuitBreaker)> {
        self.services.iter_sorted()
    }

    fn params_for_service(&self, service: &str) -> BreakerParams {
        self.routes
            .values()
            .find(|r| r.target.service_key() == service)
            .and_then(|r| r.breaker.clone())
            .unwrap_or_else(|| self.defaults.clone())
    }

    /// Validation, target resolution and the dual breaker decision.
    /// `peer` identifies the caller when the request names no client.
    pub fn admit(
        &mut self,
        request: &MessageEnvelope,
        peer: Option<&str>,
        registry: &dyn RegistryLookup,
        now: Instant,
    ) -> GatewayAdmission {
        let Some(api) = request.api.as_deref() else {
            return unroutable(request, NOT_FOUND, "request names no api".into());
        };
        let Some(route) = self.routes.get(api) else {
            return unroutable(request, NOT_FOUND, format!("no api named `{api}`"));
        };
        let api = api.to_string();
        let service = route.target.service_key().to_string();
        let service_params = route.breaker.clone().unwrap_or_else(|| self.defaults.clone());
        let target = match &route.target {
            RouteTarget::Binding(b) => b.clone(),
            RouteTarget::Service(name) => {
                let instances = registry.lookup(name, now);
                if instances.is_empty() {
                    return unroutable(
                        request,
                        SERVICE_UNAVAILABLE,
                        format!("no live instance of {name}"),
                    );
                }
                let cursor = self.cursor.entry(name.clone()).or_insert(0);
                let location = instances[*cursor % instances.len()].clone();
                *cursor = cursor.wrapping_add(1);
                TargetBinding::any(name.clone(), location)
            }
        };
        let client = request
            .client_id
            .as_deref()
            .or(peer)
            .unwrap_or(ANONYMOUS_CLIENT)
            .to_string();

        let interceptor = Interceptor::new(service_params.call_timeout_ms);
        let client_cb = self.clients.get_or_create(&client, &self.defaults);
        let service_cb = self.services.get_or_create(&service, &service_params);
        let mut gate = DualGate::new(client_cb, service_cb);
        match interceptor.admit(request, &mut gate, &target, now) {
            Admission::Settled(result) => GatewayAdmission::Settled {
                rejected_by: match result.disposition {
                    Disposition::FailFast => gate.rejected_by,
                    _ => None,
                },
                result,
            },
            Admission::Forward(pending) => GatewayAdmission::Forward(Ticket {
                api,
                client,
                service,
                target,
                pending,
                interceptor,
                service_params,
            }),
        }
    }

    /// Records the outcome of an admitted call on both of its breakers.
    pub fn complete(&mut self, ticket: &Ticket, completion: Completion, now: Instant) -> CallResult {
        let client_cb = self.clients.get_or_create(&ticket.client, &self.defaults);
        let service_cb = self.services.get_or_create(&ticket.service, &ticket.service_params);
        let mut gate = DualGate::new(client_cb, service_cb);
        ticket.interceptor.settle(&ticket.pending, completion, &mut gate, now)
    }

    /// Blocking call through `forwarder`.
    pub fn route<F: Forwarder + ?Sized>(
        &mut self,
        request: &MessageEnvelope,
        peer: Option<&str>,
        registry: &dyn RegistryLookup,
        clock: &dyn Clock,
        forwarder: &mut F,
    ) -> CallResult {
        match self.admit(request, peer, registry, clock.now()) {
            GatewayAdmission::Settled { result, .. } => result,
            GatewayAdmission::Forward(ticket) => {
                let completion = forwarder.forward(
                    &ticket.target,
                    &ticket.pending.request,
                    ticket.pending.call_timeout_ms,
                );
                self.complete(&ticket, completion, clock.now())
            }
        }
    }
}
