//! In-process transport driven by a [`ManualClock`].
//!
//! Every request is encoded and decoded exactly as on a socket, so handlers
//! see the same bytes they would over the network. Delivery latency and
//! injected failures are deterministic for a given seed and schedule.

use crate::interceptor::{Completion, Forwarder, TargetBinding};
use crate::model::MessageEnvelope;
use crate::rng::DeterministicRng;
use crate::time::{Clock, DurationMs, Instant, ManualClock};

use super::codec::{decode, encode};

/// Serves requests that arrive over a link. `None` means the handler never
/// answers, which the caller observes as a deadline expiry.
pub trait Handler: Send {
    fn handle(&mut self, request: MessageEnvelope, now: Instant) -> Option<MessageEnvelope>;
}

impl<F> Handler for F
where
    F: FnMut(MessageEnvelope, Instant) -> Option<MessageEnvelope> + Send,
{
    fn handle(&mut self, request: MessageEnvelope, now: Instant) -> Option<MessageEnvelope> {
        self(request, now)
    }
}

/// During `[from, to)`, each request is dropped with `drop_probability`,
/// otherwise fails with a transport error with `error_probability`.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureWindow {
    pub from: Instant,
    pub to: Instant,
    pub drop_probability: f64,
    pub error_probability: f64,
}

type LatencyFn = Box<dyn FnMut(&MessageEnvelope, Instant) -> DurationMs + Send>;

pub struct InProcessLink {
    clock: ManualClock,
    handler: Box<dyn Handler>,
    latency: LatencyFn,
    failures: Vec<FailureWindow>,
    rng: DeterministicRng,
    forwarded: u64,
    delivered: u64,
}

impl InProcessLink {
    /// Zero-latency, failure-free link to `handler`.
    pub fn new(clock: ManualClock, handler: impl Handler + 'static) -> Self {
        Self {
            clock,
            handler: Box::new(handler),
            latency: Box::new(|_, _| 0),
            failures: Vec::new(),
            rng: DeterministicRng::new(0),
            forwarded: 0,
            delivered: 0,
        }
    }

    /// One-way delay applied to each request and each reply.
    pub fn with_latency(
        mut self,
        latency: impl FnMut(&MessageEnvelope, Instant) -> DurationMs + Send + 'static,
    ) -> Self {
        self.latency = Box::new(latency);
        self
    }

    pub fn with_failures(mut self, windows: Vec<FailureWindow>, seed: u64) -> Self {
        self.failures = windows;
        self.rng = DeterministicRng::new(seed);
        self
    }

    /// Number of times a caller invoked `forward`.
    pub fn forward_count(&self) -> u64 {
        self.forwarded
    }

    /// Number of requests that reached the handler.
    pub fn delivered_count(&self) -> u64 {
        self.delivered
    }

    fn injected_failure(&mut self, now: Instant) -> Option<Completion> {
        let window = self
            .failures
            .iter()
            .find(|w| w.from <= now && now < w.to)?
            .clone();
        let u = self.rng.uniform();
        if u < window.drop_probability {
            Some(Completion::DeadlineExpired)
        } else if u < window.drop_probability + window.error_probability {
            Some(Completion::TransportError("injected transport error".into()))
        } else {
            None
        }
    }

    fn expire(&self, deadline: Instant) -> Completion {
        self.clock.advance_to(deadline);
        Completion::DeadlineExpired
    }
}

impl Forwarder for InProcessLink {
    fn forward(
        &mut self,
        _target: &TargetBinding,
        request: &MessageEnvelope,
        budget_ms: DurationMs,
    ) -> Completion {
        self.forwarded += 1;
        let start = self.clock.now();
        let deadline = start.plus(budget_ms);
        let frame = match encode(request) {
            Ok(f) => f,
            Err(e) => return Completion::TransportError(e.to_string()),
        };
        match self.injected_failure(start) {
            Some(Completion::DeadlineExpired) => return self.expire(deadline),
            Some(other) => return other,
            None => {}
        }

        let arrival = start.plus((self.latency)(request, start));
        if arrival > deadline {
            return self.expire(deadline);
        }
        self.clock.advance_to(arrival);
        let delivered = match decode(&frame) {
            Ok(env) => env,
            Err(e) => return Completion::TransportError(e.to_string()),
        };
        self.delivered += 1;
        let Some(reply) = self.handler.handle(delivered, arrival) else {
            return self.expire(deadline);
        };

        let sent = self.clock.now();
        let back = sent.plus((self.latency)(&reply, sent));
        if back > deadline {
            return self.expire(deadline);
        }
        let frame = match encode(&reply) {
            Ok(f) => f,
            Err(e) => return Completion::TransportError(e.to_string()),
        };
        self.clock.advance_to(back);
        match decode(&frame) {
            Ok(env) => Completion::Reply(env),
            Err(e) => Completion::TransportError(e.to_string()),
        }
    }
}
