use std::collections::{BTreeMap, HashMap};

use crate::breaker::{BreakerParams, CircuitBreaker};
use crate::interceptor::{
    Admission, CallResult, Completion, Disposition, Forwarder, Interceptor, PendingCall,
    TargetBinding,
};
use crate::model::{FaultInfo, FaultOrigin, MessageEnvelope, INVALID_REQUEST, SERVICE_UNAVAILABLE};
use crate::breaker::Outcome;
use crate::time::{Clock, Instant};

use super::RegistryLookup;

/// Server-side discovery: callers address the router, which looks the
/// service up, picks an instance round-robin and forwards through a breaker
/// it keeps per service. The service name is taken from the request's `api`.
#[derive(Debug)]
pub struct ServerSideRouter {
    params: BreakerParams,
    interceptor: Interceptor,
    breakers: BTreeMap<String, CircuitBreaker>,
    cursor: HashMap<String, usize>,
}

#[derive(Debug)]
pub enum RouterAdmission {
    Forward {
        service: String,
        target: TargetBinding,
        pending: PendingCall,
    },
    Settled(CallResult),
}

fn refused(request: &MessageEnvelope, fault: FaultInfo) -> CallResult {
    CallResult {
        envelope: request.fail(fault),
        latency_ms: 0,
        outcome: Outcome::Failure,
        disposition: Disposition::Invalid,
    }
}

impl ServerSideRouter {
    pub fn new(params: BreakerParams) -> Self {
        Self {
            interceptor: Interceptor::new(params.call_timeout_ms),
            params,
            breakers: BTreeMap::new(),
            cursor: HashMap::new(),
        }
    }

    pub fn breaker(&self, service: &str) -> Option<&CircuitBreaker> {
        self.breakers.get(service)
    }

    pub fn breaker_mut(&mut self, service: &str) -> &mut CircuitBreaker {
        let params = &self.params;
        self.breakers
            .entry(service.to_string())
            .or_insert_with(|| CircuitBreaker::new(params.clone()))
    }

    pub fn breakers(&self) -> impl Iterator<Item = (&str, &CircuitBreaker)> {
        self.breakers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn admit(
        &mut self,
        request: &MessageEnvelope,
        registry: &dyn RegistryLookup,
        now: Instant,
    ) -> RouterAdmission {
        let Some(service) = request.api.clone() else {
            return RouterAdmission::Settled(refused(
                request,
                FaultInfo::new(INVALID_REQUEST, "request names no service", FaultOrigin::Transport),
            ));
        };
        let instances = registry.lookup(&service, now);
        if instances.is_empty() {
            return RouterAdmission::Settled(refused(
                request,
                FaultInfo::new(
                    SERVICE_UNAVAILABLE,
                    format!("no live instance of {service}"),
                    FaultOrigin::Transport,
                ),
            ));
        }
        let cursor = self.cursor.entry(service.clone()).or_insert(0);
        let location = instances[*cursor % instances.len()].clone();
        let target = TargetBinding::any(service.clone(), location);
        let interceptor = self.interceptor.clone();
        let breaker = self.breaker_mut(&service);
        match interceptor.admit(request, breaker, &target, now) {
            Admission::Settled(result) => RouterAdmission::Settled(result),
            Admission::Forward(pending) => {
                // only calls that actually go out advance the rotation
                *self.cursor.get_mut(&service).expect("inserted above") += 1;
                RouterAdmission::Forward {
                    service,
                    target,
                    pending,
                }
            }
        }
    }

    pub fn settle(
        &mut self,
        service: &str,
        pending: &PendingCall,
        completion: Completion,
        now: Instant,
    ) -> CallResult {
        let interceptor = self.interceptor.clone();
        interceptor.settle(pending, completion, self.breaker_mut(service), now)
    }

    /// Blocking route through `forwarder`.
    pub fn route<F: Forwarder + ?Sized>(
        &mut self,
        request: &MessageEnvelope,
        registry: &dyn RegistryLookup,
        clock: &dyn Clock,
        forwarder: &mut F,
    ) -> CallResult {
        match self.admit(request, registry, clock.now()) {
            RouterAdmission::Settled(result) => result,
            RouterAdmission::Forward {
                service,
                target,
                pending,
            } => {
                let completion = forwarder.forward(&target, &pending.request, pending.call_timeout_ms);
                self.settle(&service, &pending, completion, clock.now())
            }
        }
    }
}
