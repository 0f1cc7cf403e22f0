//! Simulation results.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::breaker::{BreakerState, Outcome, Transition};
use crate::interceptor::Disposition;
use crate::model::FaultOrigin;
use crate::time::{DurationMs, Instant};

use super::Topology;

/// One call from a caller (a client, or a service calling its dependency)
/// to a target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub id: u64,
    /// The call whose processing issued this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<u64>,
    pub caller: String,
    /// Service name, or API name in the gateway topology.
    pub target: String,
    /// Backing service, once known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<String>,
    pub t_send: Instant,
    /// Arrival at the instance; absent when the call never left the caller.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_reached: Option<Instant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_reply: Option<Instant>,
    /// Unfinished calls are censored at the end of the run.
    pub latency_ms: DurationMs,
    /// Absent while the call was still outstanding at the end of the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
    pub disposition: Disposition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault_origin: Option<FaultOrigin>,
}

impl CallRecord {
    pub fn is_client_call(&self) -> bool {
        self.parent.is_none()
    }

    pub fn reached_backend(&self) -> bool {
        self.t_reached.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakerSummary {
    pub name: String,
    pub final_state: BreakerState,
    pub transitions: Vec<Transition>,
}

impl BreakerSummary {
    /// Time of the first Closed → Open transition.
    pub fn first_trip(&self) -> Option<Instant> {
        self.transitions
            .iter()
            .find(|t| t.from == BreakerState::Closed && t.to == BreakerState::Open)
            .map(|t| t.at)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueSample {
    pub t: Instant,
    /// Requests waiting for a free slot, summed over instances.
    pub waiting: u64,
    pub in_service: u64,
}

/// Summary of the calls made by clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub calls: u64,
    pub succeeded: u64,
    pub failed: u64,
    pub timed_out: u64,
    pub unfinished: u64,
    /// Fraction of calls that succeeded; 1 when there were none.
    pub availability: f64,
    pub p50_latency_ms: DurationMs,
    pub p99_latency_ms: DurationMs,
    pub fail_fast: u64,
    pub backend_reached: u64,
}

/// Every call addressed to one service, clients' and dependencies' alike.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceStats {
    pub calls: u64,
    pub reached: u64,
    pub succeeded: u64,
    pub fail_fast: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub topology: Topology,
    pub duration_ms: DurationMs,
    pub aggregate: Aggregates,
    pub services: BTreeMap<String, ServiceStats>,
    pub breakers: Vec<BreakerSummary>,
    pub queues: BTreeMap<String, Vec<QueueSample>>,
    pub calls: Vec<CallRecord>,
}

/// Nearest-rank percentile of an ascending slice; 0 for an empty one.
pub fn nearest_rank(sorted: &[DurationMs], pct: u32) -> DurationMs {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (u64::from(pct) * sorted.len() as u64).div_ceil(100).max(1);
    sorted[(rank - 1) as usize]
}

pub fn aggregate(calls: &[CallRecord]) -> Aggregates {
    let mut a = Aggregates {
        calls: 0,
        succeeded: 0,
        failed: 0,
        timed_out: 0,
        unfinished: 0,
        availability: 1.0,
        p50_latency_ms: 0,
        p99_latency_ms: 0,
        fail_fast: 0,
        backend_reached: 0,
    };
    let mut latencies = Vec::new();
    for c in calls.iter().filter(|c| c.is_client_call()) {
        a.calls += 1;
        match c.outcome {
            Some(Outcome::Success) => a.succeeded += 1,
            Some(Outcome::Failure) => a.failed += 1,
            Some(Outcome::Timeout) => a.timed_out += 1,
            None => a.unfinished += 1,
        }
        if c.disposition == Disposition::FailFast {
            a.fail_fast += 1;
        }
        if c.reached_backend() {
            a.backend_reached += 1;
        }
        latencies.push(c.latency_ms);
    }
    if a.calls > 0 {
        a.availability = a.succeeded as f64 / a.calls as f64;
    }
    latencies.sort_unstable();
    a.p50_latency_ms = nearest_rank(&latencies, 50);
    a.p99_latency_ms = nearest_rank(&latencies, 99);
    a
}

pub fn service_stats(calls: &[CallRecord]) -> BTreeMap<String, ServiceStats> {
    let mut out: BTreeMap<String, ServiceStats> = BTreeMap::new();
    for c in calls {
        let Some(service) = &c.service else { continue };
        let s = out.entry(service.clone()).or_default();
        s.calls += 1;
        s.reached += u64::from(c.reached_backend());
        s.succeeded += u64::from(c.outcome == Some(Outcome::Success));
        s.fail_fast += u64::from(c.disposition == Disposition::FailFast);
    }
    out
}

impl MetricsReport {
    /// Whether the stored summaries match the per-call records.
    pub fn is_self_consistent(&self) -> bool {
        aggregate(&self.calls) == self.aggregate && service_stats(&self.calls) == self.services
    }

    pub fn breaker(&self, name: &str) -> Option<&BreakerSummary> {
        self.breakers.iter().find(|b| b.name == name)
    }

    /// Calls that reached `service` at a time in `[from, to)`.
    pub fn reached_between(&self, service: &str, from: Instant, to: Instant) -> usize {
        self.calls
            .iter()
            .filter(|c| c.service.as_deref() == Some(service))
            .filter(|c| matches!(c.t_reached, Some(t) if t >= from && t < to))
            .count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }

    pub fn render_table(&self) -> String {
        let a = &self.aggregate;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "topology {}  seed {}  duration {} ms",
            self.topology, self.seed, self.duration_ms
        );
        let _ = writeln!(
            out,
            "client calls {}  ok {}  failed {}  timed out {}  unfinished {}",
            a.calls, a.succeeded, a.failed, a.timed_out, a.unfinished
        );
        let _ = writeln!(
            out,
            "availability {:.2}%  p50 {} ms  p99 {} ms  fail-fast {}  reached backend {}",
            a.availability * 100.0,
            a.p50_latency_ms,
            a.p99_latency_ms,
            a.fail_fast,
            a.backend_reached
        );
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<24} {:>8} {:>8} {:>8} {:>9} {:>11}",
            "service", "calls", "reached", "ok", "fail-fast", "max queue"
        );
        for (name, s) in &self.services {
            let max_queue = self
                .queues
                .get(name)
                .and_then(|q| q.iter().map(|x| x.waiting).max())
                .unwrap_or(0);
            let _ = writeln!(
                out,
                "{:<24} {:>8} {:>8} {:>8} {:>9} {:>11}",
                name, s.calls, s.reached, s.succeeded, s.fail_fast, max_queue
            );
        }
        if !self.breakers.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<32} {:>10} {:>7} {:>12}", "breaker", "state", "trips", "first trip");
            for b in &self.breakers {
                let trips = b.transitions.iter().filter(|t| t.to == BreakerState::Open && t.from != BreakerState::Open).count();
                let first = b.first_trip().map_or("-".to_string(), |t| format!("{t}"));
                let _ = writeln!(
                    out,
                    "{:<32} {:>10} {:>7} {:>12}",
                    b.name,
                    b.final_state.to_string(),
                    trips,
                    first
                );
            }
        }
        out
    }
}
