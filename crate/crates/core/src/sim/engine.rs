//! The event loop behind [`run_scenario`](super::run_scenario).
//!
//! Every call is a hop from a caller to a service instance. Instances hold
//! at most `capacity` requests in service and queue the rest; a request that
//! fails by hanging keeps its slot for the rest of the run. Network delay is
//! zero, so a forwarded request reaches its instance the moment it is sent.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde_json::Value;

use crate::breaker::{BreakerParams, BreakerState, CircuitBreaker, DualGate, Outcome};
use crate::gateway::{Gateway, GatewayAdmission, Redirection, RouteTarget, Ticket};
use crate::interceptor::{
    classify, Admission, CallResult, Completion, Disposition, Interceptor, Location, PendingCall,
    TargetBinding,
};
use crate::model::{FaultInfo, FaultOrigin, MessageEnvelope, SERVICE_UNAVAILABLE};
use crate::registry::{ClientResolver, Registry, RegistryLookup, ServiceRecord};
use crate::rng::DeterministicRng;
use crate::time::Instant;

use super::clock::VirtualClock;
use super::report::{self, BreakerSummary, CallRecord, MetricsReport, QueueSample};
use super::scenario::{DiscoveryMode, FailureMode, Scenario, Topology};

/// Fault a service answers with when its failure schedule fires.
pub const SERVICE_FAULT: &str = "ServiceFault";
/// Fault a service answers with when its own dependency call failed.
pub const DEPENDENCY_FAULT: &str = "DependencyFault";
/// Gateway API prefix under which services reach their dependencies.
pub const INTERNAL_API_PREFIX: &str = "internal/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Side {
    Client,
    Service,
}

enum Event {
    ClientSend { client: usize },
    Finish { call: u64, fault: Option<&'static str> },
    Deadline { call: u64 },
    ResetTimer { side: Side, key: String },
    Heartbeat,
    Sample,
    Deploy { route: usize },
}

/// The breakers a forwarded call reports back to.
enum Guard {
    Plain,
    Single { side: Side, key: String },
    Dual { client: String, service: String },
    Gateway(Box<Ticket>),
}

struct Outstanding {
    request: MessageEnvelope,
    guard: Guard,
    /// Absent for plain calls and gateway calls, whose ticket carries it.
    pending: Option<PendingCall>,
}

struct Instance {
    name: String,
    in_service: u32,
    queue: VecDeque<u64>,
}

struct ServiceState {
    instances: Vec<Instance>,
    rng: DeterministicRng,
}

pub(super) struct Engine<'a> {
    s: &'a Scenario,
    params: BreakerParams,
    interceptor: Interceptor,
    clock: VirtualClock<Event>,
    end: Instant,
    services: Vec<ServiceState>,
    instance_index: HashMap<String, (usize, usize)>,
    registry: Registry,
    resolvers: BTreeMap<String, ClientResolver>,
    cursors: HashMap<String, usize>,
    client_breakers: BTreeMap<String, CircuitBreaker>,
    service_breakers: BTreeMap<String, CircuitBreaker>,
    gateway: Option<Gateway>,
    opens_seen: HashMap<(Side, String), usize>,
    calls: Vec<CallRecord>,
    outstanding: HashMap<u64, Outstanding>,
    jobs: HashMap<u64, (usize, usize)>,
    sent: Vec<u64>,
    queues: BTreeMap<String, Vec<QueueSample>>,
}

fn instance_ttl(s: &Scenario) -> u64 {
    match &s.registry {
        Some(r) => r.ttl_ms,
        // nothing heartbeats, so records must outlive the run
        None => s.duration_ms.saturating_add(1),
    }
}

impl<'a> Engine<'a> {
    pub(super) fn new(s: &'a Scenario) -> Self {
        let params = s.breaker_params();
        let mut master = DeterministicRng::new(s.seed);
        let mut registry = Registry::new();
        let mut instance_index = HashMap::new();
        let mut services = Vec::new();
        for (si, spec) in s.services.iter().enumerate() {
            let instances = (0..spec.instances)
                .map(|i| {
                    let name = format!("{}-{i}", spec.name);
                    instance_index.insert(name.clone(), (si, i as usize));
                    registry
                        .register(ServiceRecord::new(
                            spec.name.clone(),
                            name.clone(),
                            Location::InProcess(name.clone()),
                            Instant::ZERO,
                            instance_ttl(s),
                        ))
                        .expect("validated scenario");
                    Instance {
                        name,
                        in_service: 0,
                        queue: VecDeque::new(),
                    }
                })
                .collect();
            services.push(ServiceState {
                instances,
                rng: master.fork(),
            });
        }

        let mut engine = Self {
            s,
            interceptor: Interceptor::new(params.call_timeout_ms),
            params,
            clock: VirtualClock::new(),
            end: Instant(s.duration_ms),
            services,
            instance_index,
            registry,
            resolvers: BTreeMap::new(),
            cursors: HashMap::new(),
            client_breakers: BTreeMap::new(),
            service_breakers: BTreeMap::new(),
            gateway: None,
            opens_seen: HashMap::new(),
            calls: Vec::new(),
            outstanding: HashMap::new(),
            jobs: HashMap::new(),
            sent: vec![0; s.clients.len()],
            queues: s.services.iter().map(|x| (x.name.clone(), Vec::new())).collect(),
        };
        engine.create_breakers();
        engine
    }

    fn callers(&self) -> Vec<(String, Vec<String>)> {
        let all: Vec<String> = self.s.services.iter().map(|x| x.name.clone()).collect();
        let mut out: Vec<_> = self.s.clients.iter().map(|c| (c.id.clone(), all.clone())).collect();
        for svc in &self.s.services {
            if let Some(dep) = &svc.depends_on {
                out.push((svc.name.clone(), vec![dep.clone()]));
            }
        }
        out
    }

    // Breakers exist from the start so that untouched ones show up in the
    // report as closed.
    fn create_breakers(&mut self) {
        let p = &self.params;
        match self.s.topology {
            Topology::NoBreaker => {}
            Topology::ClientSide => {
                for (caller, targets) in self.callers() {
                    for t in targets {
                        self.client_breakers
                            .insert(format!("{caller}->{t}"), CircuitBreaker::new(p.clone()));
                    }
                }
            }
            Topology::ServiceSide => {
                for svc in &self.s.services {
                    self.service_breakers
                        .insert(svc.name.clone(), CircuitBreaker::new(p.clone()));
                }
            }
            Topology::Proxy => {
                for (caller, _) in self.callers() {
                    self.client_breakers.insert(caller, CircuitBreaker::new(p.clone()));
                }
                for svc in &self.s.services {
                    self.service_breakers
                        .insert(svc.name.clone(), CircuitBreaker::new(p.clone()));
                }
            }
            Topology::Gateway => {
                let mut gw = Gateway::new(p.clone());
                for svc in &self.s.services {
                    if let Some(dep) = &svc.depends_on {
                        let api = format!("{INTERNAL_API_PREFIX}{dep}");
                        if gw.route_for(&api).is_none() {
                            gw.deploy(Redirection::new(
                                api,
                                RouteTarget::Service(dep.clone()),
                                Instant::ZERO,
                            ))
                            .expect("validated scenario");
                        }
                    }
                }
                self.gateway = Some(gw);
            }
        }
    }

    fn breaker_name(&self, side: Side, key: &str) -> String {
        let t = self.s.topology;
        match (t, side) {
            (Topology::ClientSide | Topology::ServiceSide, _) => format!("{t}:{key}"),
            (_, Side::Client) => format!("{t}:client:{key}"),
            (_, Side::Service) => format!("{t}:service:{key}"),
        }
    }

    pub(super) fn run(mut self) -> MetricsReport {
        self.clock.schedule(Instant::ZERO, Event::Sample);
        if let Some(r) = &self.s.registry {
            self.clock.schedule(Instant(r.heartbeat_ms), Event::Heartbeat);
        }
        for (i, r) in self.s.routes.iter().enumerate() {
            if r.at_ms == 0 {
                self.deploy(i);
            } else {
                self.clock.schedule(Instant(r.at_ms), Event::Deploy { route: i });
            }
        }
        for (i, c) in self.s.clients.iter().enumerate() {
            self.clock.schedule(Instant(c.start_ms), Event::ClientSend { client: i });
        }

        while let Some(t) = self.clock.peek_time() {
            if t >= self.end {
                break;
            }
            let (_, event) = self.clock.pop().expect("peeked");
            self.handle(event);
            self.schedule_reset_timers();
        }
        self.finish()
    }

    fn now(&self) -> Instant {
        self.clock.now()
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::ClientSend { client } => self.client_send(client),
            Event::Finish { call, fault } => self.job_finished(call, fault),
            Event::Deadline { call } => {
                if let Some(out) = self.outstanding.remove(&call) {
                    self.settle(call, out, Completion::DeadlineExpired);
                }
            }
            Event::ResetTimer { side, key } => {
                let now = self.now();
                if let Some(cb) = self.breaker_mut(side, &key) {
                    cb.on_reset_timer(now);
                }
            }
            Event::Heartbeat => self.heartbeat(),
            Event::Sample => self.sample(),
            Event::Deploy { route } => self.deploy(route),
        }
    }

    fn client_send(&mut self, client: usize) {
        let c = &self.s.clients[client];
        let stop = Instant(c.stop_ms.unwrap_or(self.s.duration_ms).min(self.s.duration_ms));
        let now = self.now();
        if now >= stop || c.max_requests.is_some_and(|m| self.sent[client] >= m) {
            return;
        }
        self.sent[client] += 1;
        self.issue(&c.id, &c.target, None);
        self.clock
            .schedule(now.plus(c.interval_ms), Event::ClientSend { client });
    }

    fn heartbeat(&mut self) {
        let now = self.now();
        let ttl = instance_ttl(self.s);
        for (spec, state) in self.s.services.iter().zip(&self.services) {
            for inst in &state.instances {
                if self.registry.heartbeat(&spec.name, &inst.name, now).is_err() {
                    // expired between beats: publish again
                    let rec = ServiceRecord::new(
                        spec.name.clone(),
                        inst.name.clone(),
                        Location::InProcess(inst.name.clone()),
                        now,
                        ttl,
                    );
                    self.registry.register(rec).expect("validated scenario");
                }
            }
        }
        if let Some(r) = &self.s.registry {
            self.clock.schedule(now.plus(r.heartbeat_ms), Event::Heartbeat);
        }
    }

    fn sample(&mut self) {
        let now = self.now();
        for (spec, state) in self.s.services.iter().zip(&self.services) {
            let waiting = state.instances.iter().map(|i| i.queue.len() as u64).sum();
            let in_service = state.instances.iter().map(|i| u64::from(i.in_service)).sum();
            self.queues.get_mut(&spec.name).expect("one per service").push(QueueSample {
                t: now,
                waiting,
                in_service,
            });
        }
        self.clock
            .schedule(now.plus(self.s.sample_interval_ms), Event::Sample);
    }

    fn deploy(&mut self, route: usize) {
        let r = &self.s.routes[route];
        let now = self.now();
        if let Some(gw) = self.gateway.as_mut() {
            gw.deploy(Redirection::new(
                r.api.clone(),
                RouteTarget::Service(r.service.clone()),
                now,
            ))
            .expect("validated scenario");
        }
    }

    fn breaker_mut(&mut self, side: Side, key: &str) -> Option<&mut CircuitBreaker> {
        if let Some(gw) = self.gateway.as_mut() {
            return Some(match side {
                Side::Client => gw.client_breaker_mut(key),
                Side::Service => gw.service_breaker_mut(key),
            });
        }
        match side {
            Side::Client => self.client_breakers.get_mut(key),
            Side::Service => self.service_breakers.get_mut(key),
        }
    }

    fn all_breakers(&self) -> Vec<(Side, String, &CircuitBreaker)> {
        let mut out = Vec::new();
        if let Some(gw) = &self.gateway {
            for (k, cb) in gw.client_breakers() {
                out.push((Side::Client, k.to_string(), cb));
            }
            for (k, cb) in gw.service_breakers() {
                out.push((Side::Service, k.to_string(), cb));
            }
        }
        for (k, cb) in &self.client_breakers {
            out.push((Side::Client, k.clone(), cb));
        }
        for (k, cb) in &self.service_breakers {
            out.push((Side::Service, k.clone(), cb));
        }
        out
    }

    /// Arms a reset timer for every breaker that opened since the last look.
    fn schedule_reset_timers(&mut self) {
        let mut timers = Vec::new();
        let mut seen_now = Vec::new();
        for (side, key, cb) in self.all_breakers() {
            let log = cb.transitions();
            let seen = self.opens_seen.get(&(side, key.clone())).copied().unwrap_or(0);
            if seen == log.len() {
                continue;
            }
            for t in &log[seen..] {
                if t.to == BreakerState::Open && t.from != BreakerState::Open {
                    timers.push((t.at.plus(cb.params().reset_timeout_ms), side, key.clone()));
                }
            }
            seen_now.push(((side, key), log.len()));
        }
        self.opens_seen.extend(seen_now);
        for (at, side, key) in timers {
            self.clock.schedule(at, Event::ResetTimer { side, key });
        }
    }

    /// Picks the instance `caller` sends to.
    fn select(&mut self, caller: &str, service: &str) -> Result<Location, FaultInfo> {
        let now = self.now();
        if let Some(r) = &self.s.registry {
            if r.discovery == DiscoveryMode::ClientSide {
                let cache_ttl = r.cache_ttl_ms;
                return self
                    .resolvers
                    .entry(caller.to_string())
                    .or_insert_with(|| ClientResolver::new(cache_ttl))
                    .resolve(&self.registry, service, now);
            }
        }
        let live = self.registry.lookup(service, now);
        if live.is_empty() {
            return Err(FaultInfo::new(
                SERVICE_UNAVAILABLE,
                format!("no live instance of {service}"),
                FaultOrigin::Transport,
            ));
        }
        let cursor = self.cursors.entry(service.to_string()).or_insert(0);
        let pick = live[*cursor % live.len()].clone();
        *cursor += 1;
        Ok(pick)
    }

    fn issue(&mut self, caller: &str, target: &str, parent: Option<u64>) {
        let now = self.now();
        let id = self.calls.len() as u64;
        let request = MessageEnvelope::request(id.to_string(), "call", Value::Null)
            .with_api(target)
            .with_client(caller);
        let gateway_mode = self.s.topology == Topology::Gateway;
        self.calls.push(CallRecord {
            id,
            parent,
            caller: caller.to_string(),
            target: target.to_string(),
            service: (!gateway_mode).then(|| target.to_string()),
            instance: None,
            t_send: now,
            t_reached: None,
            t_reply: None,
            latency_ms: 0,
            outcome: None,
            disposition: Disposition::Forwarded,
            fault: None,
            fault_origin: None,
        });

        if let Some(gw) = self.gateway.as_mut() {
            match gw.admit(&request, None, &self.registry, now) {
                GatewayAdmission::Settled { result, .. } => {
                    self.calls[id as usize].service =
                        gw.route_for(target).map(|r| r.target.service_key().to_string());
                    self.record(id, result);
                }
                GatewayAdmission::Forward(ticket) => {
                    self.calls[id as usize].service = Some(ticket.service.clone());
                    let location = ticket.target.location.clone();
                    let pending = None;
                    self.dispatch(id, &location, request, Guard::Gateway(Box::new(ticket)), pending);
                }
            }
            return;
        }

        let location = match self.select(caller, target) {
            Ok(l) => l,
            Err(fault) => {
                let result = CallResult {
                    envelope: request.fail(fault),
                    latency_ms: 0,
                    outcome: Outcome::Failure,
                    disposition: Disposition::Invalid,
                };
                self.record(id, result);
                return;
            }
        };
        let binding = TargetBinding::any(target, location.clone());
        let (admission, guard) = match self.s.topology {
            Topology::NoBreaker | Topology::Gateway => {
                self.dispatch(id, &location, request, Guard::Plain, None);
                return;
            }
            Topology::ClientSide => {
                let key = format!("{caller}->{target}");
                let cb = self.client_breakers.get_mut(&key).expect("created up front");
                let admission = self.interceptor.admit(&request, cb, &binding, now);
                (admission, Guard::Single { side: Side::Client, key })
            }
            Topology::ServiceSide => {
                let key = target.to_string();
                let cb = self.service_breakers.get_mut(&key).expect("created up front");
                let admission = self.interceptor.admit(&request, cb, &binding, now);
                (admission, Guard::Single { side: Side::Service, key })
            }
            Topology::Proxy => {
                let (client, service) = (caller.to_string(), target.to_string());
                let c = self.client_breakers.get_mut(&client).expect("created up front");
                let sv = self.service_breakers.get_mut(&service).expect("created up front");
                let admission =
                    self.interceptor.admit(&request, &mut DualGate::new(c, sv), &binding, now);
                (admission, Guard::Dual { client, service })
            }
        };
        match admission {
            Admission::Settled(result) => self.record(id, result),
            Admission::Forward(pending) => {
                self.dispatch(id, &location, request, guard, Some(pending))
            }
        }
    }

    fn dispatch(
        &mut self,
        id: u64,
        location: &Location,
        request: MessageEnvelope,
        guard: Guard,
        pending: Option<PendingCall>,
    ) {
        let now = self.now();
        let deadline = match &guard {
            Guard::Gateway(t) => Some(t.pending.deadline),
            _ => pending.as_ref().map(|p| p.deadline),
        };
        let Location::InProcess(name) = location else {
            unreachable!("simulated instances are in-process")
        };
        let name = name.clone();
        let (si, ii) = self.instance_index[&name];
        let rec = &mut self.calls[id as usize];
        rec.instance = Some(name);
        rec.t_reached = Some(now);
        self.outstanding.insert(
            id,
            Outstanding {
                request,
                guard,
                pending,
            },
        );
        if let Some(d) = deadline {
            self.clock.schedule(d, Event::Deadline { call: id });
        }
        let capacity = self.s.services[si].capacity.unwrap_or(u32::MAX);
        let inst = &mut self.services[si].instances[ii];
        if inst.in_service < capacity {
            self.start(id, si, ii);
        } else {
            inst.queue.push_back(id);
        }
    }

    fn start(&mut self, id: u64, si: usize, ii: usize) {
        let now = self.now();
        self.services[si].instances[ii].in_service += 1;
        self.jobs.insert(id, (si, ii));
        let spec = &self.s.services[si];
        let failure = spec
            .failures
            .iter()
            .find(|f| f.from_ms <= now.0 && now.0 < f.to_ms);
        if let Some(f) = failure {
            if self.services[si].rng.chance(f.probability) {
                match f.mode {
                    FailureMode::Hang => {}
                    FailureMode::FaultReply => self.clock.schedule(
                        now.plus(spec.base_latency_ms),
                        Event::Finish { call: id, fault: Some(SERVICE_FAULT) },
                    ),
                }
                return;
            }
        }
        match &spec.depends_on {
            Some(dep) => {
                let target = match self.s.topology {
                    Topology::Gateway => format!("{INTERNAL_API_PREFIX}{dep}"),
                    _ => dep.clone(),
                };
                self.issue(&spec.name, &target, Some(id));
            }
            None => self.clock.schedule(
                now.plus(spec.base_latency_ms),
                Event::Finish { call: id, fault: None },
            ),
        }
    }

    fn job_finished(&mut self, call: u64, fault: Option<&'static str>) {
        if let Some(out) = self.outstanding.remove(&call) {
            let reply = match fault {
                None => out.request.respond(Value::Null),
                Some(name) => out.request.fail(FaultInfo::backend(name, "")),
            };
            self.settle(call, out, Completion::Reply(reply));
        }
        let (si, ii) = self.jobs.remove(&call).expect("finish follows start");
        let inst = &mut self.services[si].instances[ii];
        inst.in_service -= 1;
        if let Some(next) = inst.queue.pop_front() {
            self.start(next, si, ii);
        }
    }

    fn settle(&mut self, id: u64, out: Outstanding, completion: Completion) {
        let now = self.now();
        let result = match out.guard {
            Guard::Plain => {
                let outcome = classify(&completion);
                let Completion::Reply(envelope) = completion else {
                    unreachable!("plain calls have no deadline")
                };
                CallResult {
                    envelope,
                    latency_ms: now.since(self.calls[id as usize].t_send),
                    outcome,
                    disposition: Disposition::Forwarded,
                }
            }
            Guard::Single { side, key } => {
                let pending = out.pending.expect("gated calls carry a deadline");
                let interceptor = self.interceptor.clone();
                let cb = self.breaker_mut(side, &key).expect("created up front");
                interceptor.settle(&pending, completion, cb, now)
            }
            Guard::Dual { client, service } => {
                let pending = out.pending.expect("gated calls carry a deadline");
                let c = self.client_breakers.get_mut(&client).expect("created up front");
                let s = self.service_breakers.get_mut(&service).expect("created up front");
                self.interceptor
                    .settle(&pending, completion, &mut DualGate::new(c, s), now)
            }
            Guard::Gateway(ticket) => self
                .gateway
                .as_mut()
                .expect("gateway topology")
                .complete(&ticket, completion, now),
        };
        self.record(id, result);
    }

    /// Stores the result of call `id` and lets a waiting parent answer.
    fn record(&mut self, id: u64, result: CallResult) {
        let now = self.now();
        let outcome = result.outcome;
        let rec = &mut self.calls[id as usize];
        rec.t_reply = Some(now);
        rec.latency_ms = result.latency_ms;
        rec.outcome = Some(outcome);
        rec.disposition = result.disposition;
        rec.fault_origin = result.fault_origin();
        rec.fault = result.envelope.fault.map(|f| f.name);
        if let Some(parent) = rec.parent {
            let (si, _) = self.jobs[&parent];
            let fault = outcome.is_error().then_some(DEPENDENCY_FAULT);
            self.clock.schedule(
                now.plus(self.s.services[si].base_latency_ms),
                Event::Finish { call: parent, fault },
            );
        }
    }

    fn finish(mut self) -> MetricsReport {
        for (id, _) in std::mem::take(&mut self.outstanding) {
            let rec = &mut self.calls[id as usize];
            rec.latency_ms = self.end.since(rec.t_send);
        }
        let mut breakers: Vec<BreakerSummary> = self
            .all_breakers()
            .into_iter()
            .map(|(side, key, cb)| BreakerSummary {
                name: self.breaker_name(side, &key),
                final_state: cb.state(),
                transitions: cb.transitions().to_vec(),
            })
            .collect();
        breakers.sort_by(|a, b| a.name.cmp(&b.name));
        MetricsReport {
            seed: self.s.seed,
            topology: self.s.topology,
            duration_ms: self.s.duration_ms,
            aggregate: report::aggregate(&self.calls),
            services: report::service_stats(&self.calls),
            breakers,
            queues: self.queues,
            calls: self.calls,
        }
    }
}
