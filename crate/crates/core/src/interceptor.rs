//! Call interception behind a breaker.
//!
//! The [`Interceptor`] sits between a caller and a [`TargetBinding`]. It asks
//! its [`Gate`] whether the call may proceed, forwards it with a deadline of
//! `call_timeout_ms`, classifies what comes back and records exactly one
//! [`Outcome`] per forwarded call. Rejected calls never reach the target and
//! record nothing.
//!
//! A call is split into [`Interceptor::admit`] and [`Interceptor::settle`] so
//! that hosts which cannot block (the simulator, a proxy releasing locks
//! while a call is in flight) drive the same code as the blocking
//! [`Interceptor::intercept`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::breaker::{Decision, Gate, Outcome};
use crate::model::{
    augment_interface, make_fault_reply, EnvelopeKind, FaultInfo, FaultOrigin,
    InterfaceDescriptor, MessageEnvelope, INVALID_REQUEST,
};
use crate::time::{Clock, DurationMs, Instant};

/// Where a target can be reached.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Location {
    /// A `host:port` socket address.
    Socket(String),
    /// A handler living in the same process, addressed as `inproc://name`.
    InProcess(String),
}

impl Location {
    pub fn parse(s: &str) -> Result<Self, String> {
        if let Some(name) = s.strip_prefix("inproc://") {
            if name.is_empty() {
                return Err("in-process location needs a name".into());
            }
            return Ok(Location::InProcess(name.to_string()));
        }
        match s.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => {
                Ok(Location::Socket(s.to_string()))
            }
            _ => Err(format!("`{s}` is not a host:port address")),
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Socket(addr) => f.write_str(addr),
            Location::InProcess(name) => write!(f, "inproc://{name}"),
        }
    }
}

impl TryFrom<String> for Location {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        Location::parse(&s)
    }
}

impl From<Location> for String {
    fn from(l: Location) -> String {
        l.to_string()
    }
}

/// A callable target: name, location and its (augmented) interface.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetBinding {
    pub service_name: String,
    pub location: Location,
    iface: InterfaceDescriptor,
}

impl TargetBinding {
    pub fn new(
        service_name: impl Into<String>,
        location: Location,
        iface: &InterfaceDescriptor,
    ) -> Self {
        Self {
            service_name: service_name.into(),
            location,
            iface: augment_interface(iface),
        }
    }

    /// Binding that accepts any operation name.
    pub fn any(service_name: impl Into<String>, location: Location) -> Self {
        Self::new(service_name, location, &InterfaceDescriptor::any())
    }

    pub fn iface(&self) -> &InterfaceDescriptor {
        &self.iface
    }
}

/// Where the breaker runs relative to caller and target. The interceptor
/// behaves the same in every mode; only the wiring around it changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeploymentMode {
    /// Inside the caller, with a remote target.
    ClientSide,
    /// Inside the service, in front of its local handler.
    ServiceSide,
    /// In a standalone process between callers and services.
    Proxy,
}

/// How a forwarded call ended, as seen by the interceptor.
#[derive(Debug, Clone, PartialEq)]
pub enum Completion {
    Reply(MessageEnvelope),
    TransportError(String),
    DeadlineExpired,
}

/// Maps a completion onto the breaker's outcome vocabulary.
pub fn classify(completion: &Completion) -> Outcome {
    match completion {
        Completion::Reply(env) if env.kind == EnvelopeKind::Response => Outcome::Success,
        Completion::Reply(_) => Outcome::Failure,
        Completion::TransportError(_) => Outcome::Failure,
        Completion::DeadlineExpired => Outcome::Timeout,
    }
}

/// What happened to a call at the interceptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    /// Sent to the target; an outcome was recorded.
    Forwarded,
    /// Refused by the breaker without contacting the target.
    FailFast,
    /// Malformed or undeclared; neither forwarded nor recorded.
    Invalid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallResult {
    pub envelope: MessageEnvelope,
    pub latency_ms: DurationMs,
    pub outcome: Outcome,
    pub disposition: Disposition,
}

impl CallResult {
    pub fn fault_origin(&self) -> Option<FaultOrigin> {
        self.envelope.fault.as_ref().map(|f| f.origin)
    }
}

/// A forwarded call waiting for its completion.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingCall {
    pub request: MessageEnvelope,
    pub started_at: Instant,
    pub deadline: Instant,
    pub call_timeout_ms: DurationMs,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Admission {
    Forward(PendingCall),
    Settled(CallResult),
}

/// Delivers a request to a target and waits for the result.
pub trait Forwarder {
    /// Returns the target's reply, a transport error, or `DeadlineExpired`
    /// if nothing arrived within `budget_ms`.
    fn forward(
        &mut self,
        target: &TargetBinding,
        request: &MessageEnvelope,
        budget_ms: DurationMs,
    ) -> Completion;
}

#[derive(Debug, Clone)]
pub struct Interceptor {
    call_timeout_ms: DurationMs,
    check_operations: bool,
}

impl Interceptor {
    pub fn new(call_timeout_ms: DurationMs) -> Self {
        Self {
            call_timeout_ms,
            check_operations: true,
        }
    }

    /// Turns off the check that the operation is declared by the target.
    pub fn without_operation_check(mut self) -> Self {
        self.check_operations = false;
        self
    }

    pub fn call_timeout_ms(&self) -> DurationMs {
        self.call_timeout_ms
    }

    fn invalid(request: &MessageEnvelope, detail: String) -> CallResult {
        let fault = FaultInfo::new(INVALID_REQUEST, detail, FaultOrigin::Transport);
        CallResult {
            envelope: request.fail(fault),
            latency_ms: 0,
            outcome: Outcome::Failure,
            disposition: Disposition::Invalid,
        }
    }

    /// First half of a call: validation and the gate decision.
    pub fn admit<G: Gate + ?Sized>(
        &self,
        request: &MessageEnvelope,
        gate: &mut G,
        target: &TargetBinding,
        now: Instant,
    ) -> Admission {
        if let Err(e) = request.validate() {
            return Admission::Settled(Self::invalid(request, e.to_string()));
        }
        if request.kind != EnvelopeKind::Request {
            return Admission::Settled(Self::invalid(
                request,
                format!("expected a request, got {}", request.kind),
            ));
        }
        if self.check_operations && !target.iface().declares(&request.operation) {
            return Admission::Settled(Self::invalid(
                request,
                format!(
                    "operation `{}` is not declared by {}",
                    request.operation, target.service_name
                ),
            ));
        }
        match gate.pre_call(now) {
            Decision::Reject => {
                let fault = FaultInfo::circuit_open(format!(
                    "circuit open for {}",
                    target.service_name
                ));
                Admission::Settled(CallResult {
                    envelope: make_fault_reply(request, fault).expect("validated request"),
                    latency_ms: 0,
                    outcome: Outcome::Failure,
                    disposition: Disposition::FailFast,
                })
            }
            Decision::Allow => Admission::Forward(PendingCall {
                request: request.clone(),
                started_at: now,
                deadline: now.plus(self.call_timeout_ms),
                call_timeout_ms: self.call_timeout_ms,
            }),
        }
    }

    /// Second half of a call: classification, bookkeeping and the reply the
    /// caller sees. A reply arriving after the deadline counts as a timeout.
    pub fn settle<G: Gate + ?Sized>(
        &self,
        pending: &PendingCall,
        completion: Completion,
        gate: &mut G,
        now: Instant,
    ) -> CallResult {
        let completion = match completion {
            Completion::Reply(_) if now > pending.deadline => Completion::DeadlineExpired,
            other => other,
        };
        let outcome = classify(&completion);
        let record_at = match completion {
            Completion::DeadlineExpired => now.max(pending.deadline),
            _ => now,
        };
        gate.record_outcome(outcome, record_at);
        let latency_ms = record_at.since(pending.started_at);
        let request = &pending.request;
        let envelope = match completion {
            Completion::Reply(mut reply) => {
                match reply.kind {
                    EnvelopeKind::Response | EnvelopeKind::Fault => {
                        reply.correlation_id = request.correlation_id.clone();
                        reply
                    }
                    // a request coming back is a broken peer
                    EnvelopeKind::Request => request.fail(FaultInfo::transport(
                        "target answered with a request envelope",
                    )),
                }
            }
            Completion::TransportError(detail) => request.fail(FaultInfo::transport(detail)),
            Completion::DeadlineExpired => {
                request.fail(FaultInfo::call_timeout(pending.call_timeout_ms))
            }
        };
        CallResult {
            envelope,
            latency_ms,
            outcome,
            disposition: Disposition::Forwarded,
        }
    }

    /// Blocking call through `forwarder`, timed by `clock`.
    pub fn intercept<G, F>(
        &self,
        request: &MessageEnvelope,
        gate: &mut G,
        target: &TargetBinding,
        clock: &dyn Clock,
        forwarder: &mut F,
    ) -> CallResult
    where
        G: Gate + ?Sized,
        F: Forwarder + ?Sized,
    {
        match self.admit(request, gate, target, clock.now()) {
            Admission::Settled(result) => result,
            Admission::Forward(pending) => {
                let completion =
                    forwarder.forward(target, &pending.request, pending.call_timeout_ms);
                self.settle(&pending, completion, gate, clock.now())
            }
        }
    }
}
