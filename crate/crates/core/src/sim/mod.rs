//! Deterministic discrete-event simulation of breaker deployments.
//!
//! A [`Scenario`] describes services (latency, capacity, failure schedule,
//! an optional downstream dependency), clients sending at fixed intervals,
//! and where the breakers sit. [`run_scenario`] plays it out in virtual time
//! with the same breaker, interceptor and gateway code used over sockets.
//! Randomness comes only from the scenario seed.

pub mod clock;
mod engine;
pub mod report;
pub mod scenario;

pub use clock::VirtualClock;
pub use engine::{DEPENDENCY_FAULT, INTERNAL_API_PREFIX, SERVICE_FAULT};
pub use report::{Aggregates, BreakerSummary, CallRecord, MetricsReport, QueueSample, ServiceStats};
pub use scenario::{
    ClientSpec, DiscoveryMode, FailureInterval, FailureMode, RegistryOptions, RouteSpec, Scenario,
    ScenarioError, ServiceSpec, Topology,
};

/// Validates `scenario` and runs it to completion.
pub fn run_scenario(scenario: &Scenario) -> Result<MetricsReport, ScenarioError> {
    scenario.validate()?;
    Ok(engine::Engine::new(scenario).run())
}
