//! The registry as a service on the wire.
//!
//! | op          | request payload                                         | response payload            |
//! |-------------|---------------------------------------------------------|-----------------------------|
//! | `register`  | `{"service","instance","location","ttl_ms"?}`           | `{"ok":true}`               |
//! | `heartbeat` | `{"service","instance"}`                                | `{"ok":true}` or `NotFound` |
//! | `lookup`    | `{"service"}`                                           | `{"locations":[...]}`       |

use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::warn;

use crate::interceptor::{Completion, Location};
use crate::model::{EnvelopeKind, FaultInfo, MessageEnvelope, INVALID_REQUEST, NOT_FOUND};
use crate::time::{Clock, DurationMs, Instant};
use crate::transport::{Peer, SharedHandler, SocketForwarder};

use super::{Registry, RegistryError, RegistryLookup, ServiceRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterPayload {
    pub service: String,
    pub instance: String,
    pub location: Location,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ttl_ms: Option<DurationMs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePayload {
    pub service: String,
    pub instance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupPayload {
    pub service: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupReply {
    pub locations: Vec<Location>,
}

fn parse<T: for<'de> Deserialize<'de>>(req: &MessageEnvelope) -> Result<T, FaultInfo> {
    serde_json::from_value(req.payload.clone())
        .map_err(|e| FaultInfo::backend(INVALID_REQUEST, format!("bad {} payload: {e}", req.operation)))
}

/// Answers one registry request against `registry` at time `now`.
pub fn handle(
    registry: &RwLock<Registry>,
    default_ttl_ms: DurationMs,
    req: &MessageEnvelope,
    now: Instant,
) -> MessageEnvelope {
    let result = match req.operation.as_str() {
        "register" => parse::<RegisterPayload>(req).and_then(|p| {
            let rec = ServiceRecord::new(
                p.service,
                p.instance,
                p.location,
                now,
                p.ttl_ms.unwrap_or(default_ttl_ms),
            );
            registry
                .write()
                .unwrap_or_else(|e| e.into_inner())
                .register(rec)
                .map(|()| json!({"ok": true}))
                .map_err(|e| FaultInfo::backend(INVALID_REQUEST, e.to_string()))
        }),
        "heartbeat" => parse::<InstancePayload>(req).and_then(|p| {
            registry
                .write()
                .unwrap_or_else(|e| e.into_inner())
                .heartbeat(&p.service, &p.instance, now)
                .map(|()| json!({"ok": true}))
                .map_err(|e| match e {
                    RegistryError::NotFound { .. } => FaultInfo::backend(NOT_FOUND, e.to_string()),
                    other => FaultInfo::backend(INVALID_REQUEST, other.to_string()),
                })
        }),
        "lookup" => parse::<LookupPayload>(req).map(|p| {
            let locations = registry.lookup(&p.service, now);
            serde_json::to_value(LookupReply { locations }).expect("plain data")
        }),
        other => Err(FaultInfo::backend(
            INVALID_REQUEST,
            format!("unknown registry operation `{other}`"),
        )),
    };
    match result {
        Ok(payload) => req.respond(payload),
        Err(fault) => req.fail(fault),
    }
}

/// Socket handler serving `registry`, timed by `clock`.
pub fn handler(
    registry: Arc<RwLock<Registry>>,
    clock: Arc<dyn Clock>,
    default_ttl_ms: DurationMs,
) -> SharedHandler {
    Arc::new(move |req: MessageEnvelope, _: &Peer| {
        Some(handle(&registry, default_ttl_ms, &req, clock.now()))
    })
}

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("registry call failed: {0}")]
    Transport(String),
    #[error("registry call timed out")]
    Timeout,
    #[error("registry answered {name}: {detail}")]
    Fault { name: String, detail: String },
    #[error("unexpected registry reply: {0}")]
    BadReply(String),
}

/// Client for a registry reachable over a socket.
#[derive(Clone)]
pub struct RemoteRegistry {
    addr: String,
    forwarder: SocketForwarder,
    timeout_ms: DurationMs,
}

impl RemoteRegistry {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            forwarder: SocketForwarder::new(),
            timeout_ms: 2_000,
        }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn call(&self, op: &str, payload: Value) -> Result<Value, RemoteError> {
        let req = MessageEnvelope::request("r", op, payload);
        match self.forwarder.call(&self.addr, &req, self.timeout_ms) {
            Completion::Reply(reply) => match (reply.kind, reply.fault) {
                (EnvelopeKind::Response, _) => Ok(reply.payload),
                (_, Some(f)) => Err(RemoteError::Fault {
                    name: f.name,
                    detail: f.detail,
                }),
                (kind, None) => Err(RemoteError::BadReply(kind.to_string())),
            },
            Completion::TransportError(e) => Err(RemoteError::Transport(e)),
            Completion::DeadlineExpired => Err(RemoteError::Timeout),
        }
    }

    pub fn register(
        &self,
        service: &str,
        instance: &str,
        location: Location,
        ttl_ms: Option<DurationMs>,
    ) -> Result<(), RemoteError> {
        let payload = RegisterPayload {
            service: service.into(),
            instance: instance.into(),
            location,
            ttl_ms,
        };
        self.call("register", serde_json::to_value(payload).expect("plain data"))
            .map(drop)
    }

    pub fn heartbeat(&self, service: &str, instance: &str) -> Result<(), RemoteError> {
        let payload = InstancePayload {
            service: service.into(),
            instance: instance.into(),
        };
        self.call("heartbeat", serde_json::to_value(payload).expect("plain data"))
            .map(drop)
    }

    pub fn try_lookup(&self, service: &str) -> Result<Vec<Location>, RemoteError> {
        let value = self.call("lookup", json!({ "service": service }))?;
        serde_json::from_value::<LookupReply>(value)
            .map(|r| r.locations)
            .map_err(|e| RemoteError::BadReply(e.to_string()))
    }
}

impl RegistryLookup for RemoteRegistry {
    /// The remote registry uses its own clock; `now` is ignored.
    fn lookup(&self, service_name: &str, _now: Instant) -> Vec<Location> {
        self.try_lookup(service_name).unwrap_or_else(|e| {
            warn!(registry = %self.addr, error = %e, "lookup failed");
            Vec::new()
        })
    }
}
