//! Envelopes, faults and interface descriptors shared by every component.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Fault raised by a circuit breaker: fail-fast rejections and call timeouts.
pub const CB_FAULT: &str = "CBFault";
/// The request could not be delivered to, or answered by, the target.
pub const TRANSPORT_FAULT: &str = "TransportFault";
/// The request itself is unusable (wrong kind, empty or undeclared operation).
pub const INVALID_REQUEST: &str = "InvalidRequest";
/// Discovery found no live instance of the requested service.
pub const SERVICE_UNAVAILABLE: &str = "ServiceUnavailable";
/// The requested API or registry entry does not exist.
pub const NOT_FOUND: &str = "NotFound";
/// An API with the same name is already deployed.
pub const ALREADY_EXISTS: &str = "AlreadyExists";

/// Operation name that stands for every operation of a target.
pub const ANY_OPERATION: &str = "*";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("expected a request envelope, got {0}")]
    NotARequest(EnvelopeKind),
    #[error("request operation must not be empty")]
    EmptyOperation,
    #[error("envelope kind {kind} {}", if *.has_fault { "must not carry fault info" } else { "requires fault info" })]
    FaultMismatch { kind: EnvelopeKind, has_fault: bool },
    #[error("fault {name} cannot have origin {origin}")]
    InconsistentFault { name: String, origin: FaultOrigin },
    #[error("an interface needs at least one operation")]
    EmptyInterface,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvelopeKind {
    Request,
    Response,
    Fault,
}

impl fmt::Display for EnvelopeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvelopeKind::Request => "request",
            EnvelopeKind::Response => "response",
            EnvelopeKind::Fault => "fault",
        })
    }
}

/// Where a non-success outcome came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultOrigin {
    /// The breaker refused to forward the call.
    Breaker,
    /// The call deadline expired before a reply arrived.
    Timeout,
    /// The target service answered with a fault of its own.
    Backend,
    /// Delivery failed, or the request was unroutable.
    Transport,
}

impl FaultOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            FaultOrigin::Breaker => "breaker",
            FaultOrigin::Timeout => "timeout",
            FaultOrigin::Backend => "backend",
            FaultOrigin::Transport => "transport",
        }
    }
}

impl fmt::Display for FaultOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultInfo {
    pub name: String,
    pub detail: String,
    pub origin: FaultOrigin,
}

impl FaultInfo {
    pub fn new(name: impl Into<String>, detail: impl Into<String>, origin: FaultOrigin) -> Self {
        Self {
            name: name.into(),
            detail: detail.into(),
            origin,
        }
    }

    /// Breaker rejected the call without contacting the target.
    pub fn circuit_open(detail: impl Into<String>) -> Self {
        Self::new(CB_FAULT, detail, FaultOrigin::Breaker)
    }

    pub fn call_timeout(timeout_ms: u64) -> Self {
        Self::new(
            CB_FAULT,
            format!("call timeout after {timeout_ms} ms"),
            FaultOrigin::Timeout,
        )
    }

    pub fn transport(detail: impl Into<String>) -> Self {
        Self::new(TRANSPORT_FAULT, detail, FaultOrigin::Transport)
    }

    pub fn backend(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::new(name, detail, FaultOrigin::Backend)
    }

    pub fn is_breaker_fault(&self) -> bool {
        self.name == CB_FAULT
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        // CBFault belongs to the breaker; backends and transports use other names.
        let consistent = self.name != CB_FAULT
            || matches!(self.origin, FaultOrigin::Breaker | FaultOrigin::Timeout);
        if consistent {
            Ok(())
        } else {
            Err(ModelError::InconsistentFault {
                name: self.name.clone(),
                origin: self.origin,
            })
        }
    }
}

/// One request, response or fault exchanged between services.
///
/// `payload` is never inspected by breakers, the registry or the gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageEnvelope {
    pub correlation_id: String,
    pub kind: EnvelopeKind,
    pub operation: String,
    pub api: Option<String>,
    pub client_id: Option<String>,
    pub payload: Value,
    pub fault: Option<FaultInfo>,
}

impl MessageEnvelope {
    pub fn request(
        correlation_id: impl Into<String>,
        operation: impl Into<String>,
        payload: Value,
    ) -> Self {
        Self {
            correlation_id: correlation_id.into(),
            kind: EnvelopeKind::Request,
            operation: operation.into(),
            api: None,
            client_id: None,
            payload,
            fault: None,
        }
    }

    pub fn with_api(mut self, api: impl Into<String>) -> Self {
        self.api = Some(api.into());
        self
    }

    pub fn with_client(mut self, client_id: impl Into<String>) -> Self {
        self.client_id = Some(client_id.into());
        self
    }

    /// Successful reply to `self`, which should be a request.
    pub fn respond(&self, payload: Value) -> Self {
        Self {
            correlation_id: self.correlation_id.clone(),
            kind: EnvelopeKind::Response,
            operation: self.operation.clone(),
            api: self.api.clone(),
            client_id: self.client_id.clone(),
            payload,
            fault: None,
        }
    }

    /// Fault reply to `self` regardless of its kind. Prefer [`make_fault_reply`]
    /// when `self` is known to be a request.
    pub fn fail(&self, fault: FaultInfo) -> Self {
        Self {
            correlation_id: self.correlation_id.clone(),
            kind: EnvelopeKind::Fault,
            operation: self.operation.clone(),
            api: self.api.clone(),
            client_id: self.client_id.clone(),
            payload: Value::Null,
            fault: Some(fault),
        }
    }

    pub fn is_request(&self) -> bool {
        self.kind == EnvelopeKind::Request
    }

    pub fn fault_name(&self) -> Option<&str> {
        self.fault.as_ref().map(|f| f.name.as_str())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let is_fault = self.kind == EnvelopeKind::Fault;
        if is_fault != self.fault.is_some() {
            return Err(ModelError::FaultMismatch {
                kind: self.kind,
                has_fault: self.fault.is_some(),
            });
        }
        if self.kind == EnvelopeKind::Request && self.operation.is_empty() {
            return Err(ModelError::EmptyOperation);
        }
        if let Some(fault) = &self.fault {
            fault.validate()?;
        }
        Ok(())
    }
}

/// Builds the fault reply a client receives in place of a response.
pub fn make_fault_reply(
    request: &MessageEnvelope,
    fault: FaultInfo,
) -> Result<MessageEnvelope, ModelError> {
    if request.kind != EnvelopeKind::Request {
        return Err(ModelError::NotARequest(request.kind));
    }
    Ok(request.fail(fault))
}

/// The operations a target service declares, each with the faults it may raise.
///
/// A descriptor containing [`ANY_OPERATION`] declares every operation name,
/// which is how a proxy protects a target whose interface it does not know.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterfaceDescriptor {
    operations: BTreeMap<String, BTreeSet<String>>,
    augmented: bool,
}

impl InterfaceDescriptor {
    pub fn new<I, S>(operations: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let operations: BTreeMap<_, _> = operations
            .into_iter()
            .map(|op| (op.into(), BTreeSet::new()))
            .collect();
        if operations.is_empty() {
            return Err(ModelError::EmptyInterface);
        }
        Ok(Self {
            operations,
            augmented: false,
        })
    }

    /// Wildcard interface accepting any operation name.
    pub fn any() -> Self {
        Self::new([ANY_OPERATION]).expect("non-empty")
    }

    /// Declares that `operation` may raise `fault`.
    pub fn with_fault(mut self, operation: &str, fault: impl Into<String>) -> Self {
        if let Some(faults) = self.operations.get_mut(operation) {
            faults.insert(fault.into());
        }
        self
    }

    pub fn operations(&self) -> impl Iterator<Item = &str> {
        self.operations.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.operations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operations.is_empty()
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    pub fn faults(&self, operation: &str) -> Option<&BTreeSet<String>> {
        self.operations
            .get(operation)
            .or_else(|| self.operations.get(ANY_OPERATION))
    }

    /// True if `operation` is part of this interface.
    pub fn declares(&self, operation: &str) -> bool {
        self.operations.contains_key(ANY_OPERATION) || self.operations.contains_key(operation)
    }
}

/// Adds `CBFault` to the fault set of every operation. Idempotent.
pub fn augment_interface(iface: &InterfaceDescriptor) -> InterfaceDescriptor {
    let mut out = iface.clone();
    for faults in out.operations.values_mut() {
        faults.insert(CB_FAULT.to_string());
    }
    out.augmented = true;
    out
}
