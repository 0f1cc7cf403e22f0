//! Circuit-breaker state machine.
//!
//! A [`CircuitBreaker`] moves between three states:
//!
//! ```text
//!              trip breaker                attempt reset
//!   Closed ──[threshold reached]──▶ Open ──[reset timeout]──▶ HalfOpen
//!     ▲                              ▲                          │
//!     │                              └────────── fail ──────────┤
//!     └────────────────────────── success ──────────────────────┘
//! ```
//!
//! It is driven entirely by explicit calls carrying the current [`Instant`],
//! so the same code runs under a wall clock or inside the simulator. The
//! reset deadline is honoured both lazily (inside [`CircuitBreaker::pre_call`])
//! and through [`CircuitBreaker::on_reset_timer`] for hosts that run timers.

mod stats;

pub use stats::{BucketCounts, ErrorRate, RollingStats};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::time::{DurationMs, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BreakerState {
    Closed,
    Open,
    HalfOpen,
}

impl fmt::Display for BreakerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BreakerState::Closed => "closed",
            BreakerState::Open => "open",
            BreakerState::HalfOpen => "half-open",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Failure,
    Timeout,
}

impl Outcome {
    pub fn is_error(self) -> bool {
        !matches!(self, Outcome::Success)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransitionReason {
    /// Closed → Open: the error rate reached the threshold.
    ThresholdReached,
    /// Open → HalfOpen: the reset timeout elapsed.
    AttemptReset,
    /// HalfOpen → Closed: enough probes succeeded.
    ProbeSucceeded,
    /// HalfOpen → Open: a probe failed or timed out.
    ProbeFailed,
    /// Open → Open: a trip was requested while already open.
    AlreadyOpen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub at: Instant,
    pub from: BreakerState,
    pub to: BreakerState,
    pub reason: TransitionReason,
}

#[derive(Debug, Error, PartialEq)]
#[error("breaker parameter `{field}` {reason}")]
pub struct ParamError {
    pub field: &'static str,
    pub reason: String,
}

/// Breaker tuning. Defaults: 20 s call timeout, 60 s rolling window, 5 %
/// trip threshold, 30 s reset timeout, at least 10 calls in the window before
/// tripping, one half-open probe, ten window buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BreakerParams {
    pub call_timeout_ms: DurationMs,
    pub rolling_window_ms: DurationMs,
    pub trip_threshold: f64,
    pub reset_timeout_ms: DurationMs,
    pub min_request_volume: u32,
    pub half_open_max_probes: u32,
    pub bucket_count: u32,
}

impl Default for BreakerParams {
    fn default() -> Self {
        Self {
            call_timeout_ms: 20_000,
            rolling_window_ms: 60_000,
            trip_threshold: 0.05,
            reset_timeout_ms: 30_000,
            min_request_volume: 10,
            half_open_max_probes: 1,
            bucket_count: 10,
        }
    }
}

impl BreakerParams {
    pub fn bucket_width_ms(&self) -> DurationMs {
        self.rolling_window_ms / u64::from(self.bucket_count.max(1))
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        let err = |field, reason: &str| {
            Err(ParamError {
                field,
                reason: reason.to_string(),
            })
        };
        if self.call_timeout_ms == 0 {
            return err("call_timeout_ms", "must be > 0");
        }
        if self.rolling_window_ms == 0 {
            return err("rolling_window_ms", "must be > 0");
        }
        if self.reset_timeout_ms == 0 {
            return err("reset_timeout_ms", "must be > 0");
        }
        if !(self.trip_threshold > 0.0 && self.trip_threshold <= 1.0) {
            return Err(ParamError {
                field: "trip_threshold",
                reason: format!("must be in (0, 1], got {}", self.trip_threshold),
            });
        }
        if self.min_request_volume == 0 {
            return err("min_request_volume", "must be >= 1");
        }
        if self.half_open_max_probes == 0 {
            return err("half_open_max_probes", "must be >= 1");
        }
        if self.bucket_count == 0 {
            return err("bucket_count", "must be >= 1");
        }
        if !self.rolling_window_ms.is_multiple_of(u64::from(self.bucket_count)) {
            return Err(ParamError {
                field: "bucket_count",
                reason: format!(
                    "must divide rolling_window_ms ({}) evenly, got {}",
                    self.rolling_window_ms, self.bucket_count
                ),
            });
        }
        Ok(())
    }
}

/// Anything that can admit calls and learn from their outcomes.
///
/// Implemented by a single [`CircuitBreaker`] and by [`DualGate`], which is
/// how the interceptor stays identical across deployment topologies.
pub trait Gate {
    fn pre_call(&mut self, now: Instant) -> Decision;
    fn record_outcome(&mut self, outcome: Outcome, now: Instant);
    /// Hands back a permit obtained from `pre_call` that will never produce
    /// an outcome.
    fn release(&mut self, now: Instant);
}

#[derive(Debug, Clone)]
pub struct CircuitBreaker {
    params: BreakerParams,
    state: BreakerState,
    stats: RollingStats,
    opened_at: Option<Instant>,
    probes_used: u32,
    probe_successes: u32,
    last_seen: Instant,
    transitions: Vec<Transition>,
}

impl CircuitBreaker {
    /// Panics if `params` is invalid; validate configuration first.
    pub fn new(params: BreakerParams) -> Self {
        if let Err(e) = params.validate() {
            panic!("invalid breaker parameters: {e}");
        }
        Self {
            stats: RollingStats::new(&params),
            params,
            state: BreakerState::Closed,
            opened_at: None,
            probes_used: 0,
            probe_successes: 0,
            last_seen: Instant::ZERO,
            transitions: Vec::new(),
        }
    }

    pub fn state(&self) -> BreakerState {
        self.state
    }

    pub fn params(&self) -> &BreakerParams {
        &self.params
    }

    pub fn stats(&self) -> &RollingStats {
        &self.stats
    }

    pub fn opened_at(&self) -> Option<Instant> {
        self.opened_at
    }

    /// When the breaker may next attempt a reset, if it is open.
    pub fn reset_deadline(&self) -> Option<Instant> {
        self.opened_at
            .map(|t| t.plus(self.params.reset_timeout_ms))
    }

    pub fn probes_used(&self) -> u32 {
        self.probes_used
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    // Readings are expected to be monotone; a stale one is treated as the
    // latest seen so counters and deadlines never move backwards.
    fn observe(&mut self, now: Instant) -> Instant {
        if now > self.last_seen {
            self.last_seen = now;
        }
        self.last_seen
    }

    fn transition(&mut self, to: BreakerState, reason: TransitionReason, now: Instant) {
        let from = self.state;
        debug!(%from, %to, ?reason, at = now.0, "breaker transition");
        self.transitions.push(Transition {
            at: now,
            from,
            to,
            reason,
        });
        self.state = to;
    }

    fn enter_half_open(&mut self, now: Instant) {
        self.stats.reset();
        self.probes_used = 0;
        self.probe_successes = 0;
        self.opened_at = None;
        self.transition(BreakerState::HalfOpen, TransitionReason::AttemptReset, now);
    }

    fn open(&mut self, now: Instant, reason: TransitionReason) {
        self.opened_at = Some(now);
        self.probes_used = 0;
        self.probe_successes = 0;
        self.transition(BreakerState::Open, reason, now);
    }

    pub fn pre_call(&mut self, now: Instant) -> Decision {
        let now = self.observe(now);
        if self.state == BreakerState::Open {
            match self.reset_deadline() {
                Some(deadline) if now >= deadline => self.enter_half_open(now),
                _ => return Decision::Reject,
            }
        }
        match self.state {
            BreakerState::Closed => Decision::Allow,
            BreakerState::HalfOpen if self.probes_used < self.params.half_open_max_probes => {
                self.probes_used += 1;
                Decision::Allow
            }
            _ => Decision::Reject,
        }
    }

    pub fn record_outcome(&mut self, outcome: Outcome, now: Instant) {
        let now = self.observe(now);
        self.stats.record(outcome, now);
        match (self.state, outcome.is_error()) {
            (BreakerState::Closed, true) => {
                if self.stats.should_trip(&self.params, now) {
                    self.trip(now);
                }
            }
            (BreakerState::HalfOpen, true) => self.trip(now),
            (BreakerState::HalfOpen, false) => {
                self.probe_successes += 1;
                if self.probe_successes >= self.params.half_open_max_probes {
                    self.stats.reset();
                    self.probes_used = 0;
                    self.probe_successes = 0;
                    self.transition(BreakerState::Closed, TransitionReason::ProbeSucceeded, now);
                }
            }
            _ => {}
        }
    }

    pub fn should_trip(&self, now: Instant) -> bool {
        self.stats.should_trip(&self.params, now)
    }

    pub fn error_rate(&self, now: Instant) -> ErrorRate {
        self.stats.error_rate(now)
    }

    /// Opens the breaker and starts the reset timeout. A no-op when already
    /// open, apart from a self-loop entry in the transition log.
    pub fn trip(&mut self, now: Instant) {
        let now = self.observe(now);
        match self.state {
            BreakerState::Closed => self.open(now, TransitionReason::ThresholdReached),
            BreakerState::HalfOpen => self.open(now, TransitionReason::ProbeFailed),
            BreakerState::Open => {
                debug!(at = now.0, "trip ignored: breaker already open");
                self.transitions.push(Transition {
                    at: now,
                    from: BreakerState::Open,
                    to: BreakerState::Open,
                    reason: TransitionReason::AlreadyOpen,
                });
            }
        }
    }

    /// Reset-timer delivery. Moves an open breaker to half-open once its
    /// reset deadline has passed; timers left over from an earlier opening
    /// find the deadline in the future and do nothing.
    pub fn on_reset_timer(&mut self, now: Instant) {
        let now = self.observe(now);
        if self.state != BreakerState::Open {
            return;
        }
        if matches!(self.reset_deadline(), Some(deadline) if now >= deadline) {
            self.enter_half_open(now);
        }
    }
}

impl Gate for CircuitBreaker {
    fn pre_call(&mut self, now: Instant) -> Decision {
        CircuitBreaker::pre_call(self, now)
    }

    fn record_outcome(&mut self, outcome: Outcome, now: Instant) {
        CircuitBreaker::record_outcome(self, outcome, now)
    }

    fn release(&mut self, now: Instant) {
        self.observe(now);
        if self.state == BreakerState::HalfOpen && self.probes_used > self.probe_successes {
            self.probes_used -= 1;
        }
    }
}

/// Client and service breaker consulted together, as a proxy does: a call
/// passes only if both allow it, and its outcome is recorded on both.
#[derive(Debug)]
pub struct DualGate<'a> {
    pub client: &'a mut CircuitBreaker,
    pub service: &'a mut CircuitBreaker,
    /// Which breaker refused the most recent `pre_call`.
    pub rejected_by: Option<GateSide>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateSide {
    Client,
    Service,
}

impl<'a> DualGate<'a> {
    pub fn new(client: &'a mut CircuitBreaker, service: &'a mut CircuitBreaker) -> Self {
        Self {
            client,
            service,
            rejected_by: None,
        }
    }
}

impl Gate for DualGate<'_> {
    fn pre_call(&mut self, now: Instant) -> Decision {
        if self.client.pre_call(now) == Decision::Reject {
            self.rejected_by = Some(GateSide::Client);
            return Decision::Reject;
        }
        if self.service.pre_call(now) == Decision::Reject {
            // The client's permit goes unused; a service rejection is not
            // the client's failure.
            Gate::release(self.client, now);
            self.rejected_by = Some(GateSide::Service);
            return Decision::Reject;
        }
        self.rejected_by = None;
        Decision::Allow
    }

    fn record_outcome(&mut self, outcome: Outcome, now: Instant) {
        self.client.record_outcome(outcome, now);
        self.service.record_outcome(outcome, now);
    }

    fn release(&mut self, now: Instant) {
        Gate::release(self.client, now);
        Gate::release(self.service, now);
    }
}
