//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the run exits non-zero if any criterion fails.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant as WallInstant};

use meshguard::breaker::{
    BreakerParams, BreakerState, CircuitBreaker, Decision, GateSide, Outcome, TransitionReason,
};
use meshguard::gateway::{Gateway, GatewayAdmission, GatewayService, NoDiscovery, Redirection, ADMIN_API};
use meshguard::interceptor::{Completion, Disposition, Interceptor, Location, TargetBinding};
use meshguard::model::{EnvelopeKind, FaultInfo, FaultOrigin, MessageEnvelope, NOT_FOUND};
use meshguard::registry::{
    ClientResolver, Registry, RegistryLookup, RouterAdmission, ServerSideRouter, ServiceRecord,
};
use meshguard::rng::DeterministicRng;
use meshguard::sim::{
    run_scenario, ClientSpec, FailureInterval, FailureMode, MetricsReport, Scenario, ServiceSpec,
    Topology,
};
use meshguard::time::{Clock, Instant, ManualClock, SystemClock};
use meshguard::transport::{decode, encode, InProcessLink, Peer, Server, SharedHandler, SocketForwarder};
use meshguard_cli::{config, run_command};
use serde_json::{json, Value};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn scaled() -> BreakerParams {
    BreakerParams {
        call_timeout_ms: 200,
        rolling_window_ms: 600,
        trip_threshold: 0.05,
        reset_timeout_ms: 300,
        min_request_volume: 10,
        half_open_max_probes: 1,
        bucket_count: 10,
    }
}

fn repo_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

// ---------------------------------------------------------------- 1

const T0: Instant = Instant(1_000_000);

fn breaker_in(state: BreakerState) -> CircuitBreaker {
    let p = scaled();
    let mut cb = CircuitBreaker::new(p.clone());
    match state {
        // one error short of the threshold at minimum volume
        BreakerState::Closed => {
            for _ in 0..p.min_request_volume - 1 {
                cb.record_outcome(Outcome::Failure, T0);
            }
        }
        BreakerState::Open => cb.trip(Instant(T0.0 - p.reset_timeout_ms)),
        BreakerState::HalfOpen => {
            cb.trip(Instant(T0.0 - p.reset_timeout_ms));
            cb.on_reset_timer(T0);
            cb.pre_call(T0);
        }
    }
    assert_eq!(cb.state(), state);
    cb
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum FsmEvent {
    PreCall,
    Success,
    Failure,
    Timeout,
    ResetTimer,
}

fn criterion_1() -> Check {
    use BreakerState::*;
    use FsmEvent::*;
    let started = WallInstant::now();
    let mut edges = BTreeSet::new();
    let mut fail_fast_loops = 0;
    for state in [Closed, Open, HalfOpen] {
        for event in [PreCall, Success, Failure, Timeout, ResetTimer] {
            let mut cb = breaker_in(state);
            let before = cb.transitions().len();
            // Open is probed just before its reset deadline so pre_call
            // exercises the fail-fast loop; the reset timer fires on time.
            let at = match (state, event) {
                (Open, PreCall) => Instant(T0.0 - 1),
                _ => T0,
            };
            let decision = match event {
                PreCall => Some(cb.pre_call(at)),
                Success => {
                    cb.record_outcome(Outcome::Success, at);
                    None
                }
                Failure => {
                    cb.record_outcome(Outcome::Failure, at);
                    None
                }
                Timeout => {
                    cb.record_outcome(Outcome::Timeout, at);
                    None
                }
                ResetTimer => {
                    cb.on_reset_timer(at);
                    None
                }
            };
            for t in &cb.transitions()[before..] {
                edges.insert((t.from, t.to, format!("{:?}", t.reason)));
            }
            if state == Open && decision == Some(Decision::Reject) && cb.state() == Open {
                fail_fast_loops += 1;
            }
            let expected_state = match (state, event) {
                (Closed, Failure | Timeout) => Open,
                (Open, ResetTimer) => HalfOpen,
                (HalfOpen, Success) => Closed,
                (HalfOpen, Failure | Timeout) => Open,
                (s, _) => s,
            };
            ensure(cb.state() == expected_state, || {
                format!("{state} + {event:?} ended {} (expected {expected_state})", cb.state())
            })?;
        }
    }
    let expected: BTreeSet<_> = [
        (Closed, Open, format!("{:?}", TransitionReason::ThresholdReached)),
        (Open, HalfOpen, format!("{:?}", TransitionReason::AttemptReset)),
        (HalfOpen, Closed, format!("{:?}", TransitionReason::ProbeSucceeded)),
        (HalfOpen, Open, format!("{:?}", TransitionReason::ProbeFailed)),
    ]
    .into();
    ensure(edges == expected, || format!("edge set {edges:?}"))?;
    ensure(fail_fast_loops == 1, || format!("{fail_fast_loops} fail-fast self-loops"))?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("15 (state, event) pairs, 4 edges + fail-fast loop, {elapsed:.0?}"))
}

// ---------------------------------------------------------------- 2

fn flat_fault_scenario(topology: Topology, clients: usize, probes: u32) -> Scenario {
    Scenario {
        seed: 0,
        duration_ms: 2000,
        topology,
        breaker: Some(BreakerParams {
            half_open_max_probes: probes,
            ..scaled()
        }),
        services: vec![ServiceSpec {
            name: "svc".into(),
            instances: 1,
            base_latency_ms: 5,
            capacity: None,
            failures: vec![FailureInterval {
                from_ms: 0,
                to_ms: u64::MAX,
                probability: 1.0,
                mode: FailureMode::FaultReply,
            }],
            depends_on: None,
        }],
        clients: (0..clients)
            .map(|i| ClientSpec {
                id: format!("c{i}"),
                target: "svc".into(),
                interval_ms: 5,
                start_ms: 0,
                stop_ms: None,
                max_requests: None,
            })
            .collect(),
        registry: None,
        routes: vec![],
        sample_interval_ms: 100,
    }
}

fn reached_at(r: &MetricsReport, t: u64) -> usize {
    r.calls.iter().filter(|c| c.t_reached == Some(Instant(t))).count()
}

fn criterion_2() -> Check {
    let started = WallInstant::now();
    let reset = scaled().reset_timeout_ms;
    let mut details = Vec::new();
    // one caller, then several callers sharing one breaker with a wider probe budget
    for (topology, clients, probes, name) in [
        (Topology::ClientSide, 1, 1, "client_side:c0->svc"),
        (Topology::ServiceSide, 3, 1, "service_side:svc"),
        (Topology::ServiceSide, 3, 2, "service_side:svc"),
    ] {
        let r = run_scenario(&flat_fault_scenario(topology, clients, probes)).map_err(|e| e.to_string())?;
        let b = r.breaker(name).ok_or("breaker missing")?;
        let trip = b.first_trip().ok_or("never tripped")?;
        // the failure whose reply tripped the breaker
        let mut replies: Vec<_> = r
            .calls
            .iter()
            .filter(|c| c.disposition == Disposition::Forwarded && c.t_reply.is_some_and(|t| t <= trip))
            .collect();
        replies.sort_by_key(|c| (c.t_reply, c.id));
        let failures_before_trip = replies
            .iter()
            .filter(|c| c.t_reply < Some(trip) && c.outcome == Some(Outcome::Failure))
            .count();
        // every client sends at each 5 ms tick and each reply fails 5 ms later,
        // so the threshold is crossed on the first tick with >= 10 failures
        let ticks = 10usize.div_ceil(clients) as u64;
        let expected_trip = Instant(5 * ticks);
        let expected_before = clients * (ticks as usize - 1);
        ensure(failures_before_trip == expected_before, || {
            format!("{name}: {failures_before_trip} failures before the trip (expected {expected_before})")
        })?;
        ensure(trip == expected_trip, || format!("{name}: tripped at {trip} (expected {expected_trip})"))?;
        let leaked = r.reached_between("svc", Instant(trip.0 + 1), Instant(trip.0 + reset));
        ensure(leaked == 0, || format!("{name}: {leaked} calls reached the backend while open"))?;
        let probes_seen = reached_at(&r, trip.0 + reset);
        ensure(probes_seen == probes as usize, || {
            format!("{name}: {probes_seen} probes at t_trip+{reset} (budget {probes})")
        })?;
        details.push(format!("{clients} client(s): trip {trip}, {probes_seen} probe(s)"));
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("{}, {elapsed:.0?}", details.join("; ")))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Check {
    let started = WallInstant::now();
    let mut rng = DeterministicRng::new(0xacce97);
    let mut queries = 0;
    for i in 0..10_000 {
        queries += oracle::check_trace(&mut || rng.next_u64()).map_err(|e| format!("trace {i}: {e}"))?;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("10000 traces, {queries} queries agree, {elapsed:.1?}"))
}

// ---------------------------------------------------------------- 4

fn trips_after(successes: u64, failures: u64) -> bool {
    let mut cb = CircuitBreaker::new(BreakerParams::default());
    for i in 0..successes {
        cb.record_outcome(Outcome::Success, Instant(i / 1000));
    }
    for i in 0..failures {
        cb.record_outcome(Outcome::Failure, Instant((successes + i) / 1000));
    }
    cb.state() == BreakerState::Open
}

fn criterion_4() -> Check {
    ensure(trips_after(19, 1), || "1/20 = 5% did not trip".into())?;
    ensure(trips_after(9_500, 500), || "500/10000 = 5% did not trip".into())?;
    ensure(!trips_after(9_501, 499), || "499/10000 = 4.99% tripped".into())?;
    ensure(!trips_after(20, 1), || "1/21 tripped".into())?;
    Ok("5.00% over 20 and 10000 calls trips; 4.99% over 10000 does not".into())
}

// ---------------------------------------------------------------- 5

const GRID_NOW: Instant = Instant(100_000);

fn force(cb: &mut CircuitBreaker, state: BreakerState) {
    let reset = cb.params().reset_timeout_ms;
    match state {
        BreakerState::Closed => {}
        BreakerState::Open => cb.trip(GRID_NOW),
        BreakerState::HalfOpen => {
            cb.trip(Instant(GRID_NOW.0 - reset));
            cb.on_reset_timer(GRID_NOW);
        }
    }
}

fn gateway_two_services() -> Gateway {
    let mut gw = Gateway::new(BreakerParams::default());
    for s in ["S1", "S2"] {
        gw.deploy(Redirection::to_location(format!("{s}API"), s, Location::InProcess(s.into()), Instant(0)))
            .unwrap();
    }
    gw
}

fn call(gw: &mut Gateway, client: &str, service: &str) -> (bool, Option<GateSide>) {
    let req = MessageEnvelope::request("1", "op", Value::Null)
        .with_api(format!("{service}API"))
        .with_client(client);
    match gw.admit(&req, None, &NoDiscovery, GRID_NOW) {
        GatewayAdmission::Forward(_) => (true, None),
        GatewayAdmission::Settled { result, rejected_by } => {
            assert_eq!(result.envelope.fault_name(), Some("CBFault"));
            (false, rejected_by)
        }
    }
}

fn criterion_5() -> Check {
    use BreakerState::*;
    for cs in [Closed, Open, HalfOpen] {
        for ss in [Closed, Open, HalfOpen] {
            let mut gw = gateway_two_services();
            force(gw.client_breaker_mut("C"), cs);
            force(gw.service_breaker_mut("S1"), ss);
            let (forwarded, by) = call(&mut gw, "C", "S1");
            let both = cs != Open && ss != Open;
            ensure(forwarded == both, || format!("client {cs} / service {ss}: forwarded={forwarded}"))?;
            if !both {
                let want = if cs == Open { GateSide::Client } else { GateSide::Service };
                ensure(by == Some(want), || format!("client {cs} / service {ss}: rejected by {by:?}"))?;
            }
        }
    }
    // C1 healthy, C2 cut off; S1 healthy, S2 cut off
    let mut gw = gateway_two_services();
    force(gw.client_breaker_mut("C1"), Closed);
    force(gw.client_breaker_mut("C2"), Open);
    force(gw.service_breaker_mut("S1"), Closed);
    force(gw.service_breaker_mut("S2"), Open);
    ensure(call(&mut gw, "C1", "S1").0, || "C1->S1 refused".into())?;
    ensure(!call(&mut gw, "C1", "S2").0, || "C1->S2 forwarded".into())?;
    ensure(!call(&mut gw, "C2", "S1").0, || "C2->S1 forwarded".into())?;
    ensure(!call(&mut gw, "C2", "S2").0, || "C2->S2 forwarded".into())?;
    Ok("9/9 grid cells; C1->S1 ok, C1->S2 and C2->* CBFault".into())
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Check {
    let started = WallInstant::now();
    let load = |name: &str| config::parse_scenario(&repo_file(name)).map_err(|e| e.to_string());
    let none = load("scenarios/cascade-no-breaker.toml")?;
    let proxy = load("scenarios/cascade-proxy.toml")?;
    ensure(none.seed == 42 && proxy.seed == 42, || "scenarios are not at seed 42".into())?;
    let call_timeout = proxy.breaker_params().call_timeout_ms;

    let r = run_scenario(&none).map_err(|e| e.to_string())?;
    let tail_from = r.duration_ms * 2 / 3;
    let tail: Vec<u64> = r.queues["B"].iter().filter(|s| s.t.0 >= tail_from).map(|s| s.waiting).collect();
    ensure(tail.len() >= 2 && tail.windows(2).all(|w| w[1] > w[0]), || {
        format!("B queue not strictly increasing in final third: {tail:?}")
    })?;
    ensure(r.aggregate.p99_latency_ms >= call_timeout, || {
        format!("no-breaker p99 {} < {call_timeout}", r.aggregate.p99_latency_ms)
    })?;
    let none_summary = format!("no breaker: B queue {}..{}, p99 {} ms", tail[0], tail[tail.len() - 1], r.aggregate.p99_latency_ms);

    let r = run_scenario(&proxy).map_err(|e| e.to_string())?;
    let again = run_scenario(&proxy).map_err(|e| e.to_string())?;
    ensure(r.to_json() == again.to_json(), || "proxy run not reproducible".into())?;
    let trip = r.breaker("proxy:service:B").and_then(|b| b.first_trip()).ok_or("B's breaker never tripped")?;
    let bound = 8 + u64::from(proxy.breaker_params().half_open_max_probes);
    let worst = r.queues["B"].iter().filter(|s| s.t > trip).map(|s| s.waiting).max().unwrap_or(0);
    ensure(worst <= bound, || format!("B queue reached {worst} after trip (bound {bound})"))?;
    ensure(r.aggregate.p99_latency_ms <= call_timeout, || {
        format!("proxy p99 {} > {call_timeout}", r.aggregate.p99_latency_ms)
    })?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{none_summary}; proxy: trip {trip}, B queue <= {worst}, p99 {} ms; {elapsed:.1?}",
        r.aggregate.p99_latency_ms
    ))
}

// ---------------------------------------------------------------- 7

fn two_clients(topology: Topology, per_client: Option<u64>, c1_target: &str) -> Scenario {
    let mut s = flat_fault_scenario(topology, 2, 1);
    s.services[0].name = "bad".into();
    s.services.push(ServiceSpec {
        name: "good".into(),
        instances: 1,
        base_latency_ms: 5,
        capacity: None,
        failures: vec![],
        depends_on: None,
    });
    s.clients[0].target = c1_target.into();
    s.clients[1].target = "bad".into();
    s.clients[1].start_ms = 2;
    for c in &mut s.clients {
        c.interval_ms = 10;
        c.max_requests = per_client;
    }
    s
}

fn criterion_7() -> Check {
    let r = run_scenario(&two_clients(Topology::ClientSide, None, "good")).map_err(|e| e.to_string())?;
    let c2 = r.breaker("client_side:c1->bad").ok_or("missing")?;
    ensure(c2.first_trip().is_some(), || "client 2's breaker never tripped".into())?;
    let c1 = r.breaker("client_side:c0->bad").ok_or("missing")?;
    ensure(c1.transitions.is_empty() && c1.final_state == BreakerState::Closed, || {
        format!("client 1's breaker moved: {:?}", c1.transitions)
    })?;

    let proxy = run_scenario(&two_clients(Topology::Proxy, Some(6), "bad")).map_err(|e| e.to_string())?;
    let shared = proxy.breaker("proxy:service:bad").and_then(|b| b.first_trip());
    ensure(shared.is_some(), || "shared breaker did not trip on 6+6 failures".into())?;
    let alone = run_scenario(&two_clients(Topology::ClientSide, Some(6), "bad")).map_err(|e| e.to_string())?;
    for name in ["client_side:c0->bad", "client_side:c1->bad"] {
        let b = alone.breaker(name).ok_or("missing")?;
        ensure(b.first_trip().is_none(), || format!("{name} tripped on 6 failures"))?;
    }
    Ok(format!(
        "client 1 stays closed while client 2 trips; 6+6 failures trip the proxy at {}, neither client alone",
        shared.unwrap()
    ))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Check {
    // TTL liveness against a direct model, over random operation sequences
    let mut rng = DeterministicRng::new(8);
    let mut checks = 0;
    for _ in 0..300 {
        let mut reg = Registry::new();
        let mut model: BTreeMap<(u64, u64), (String, u64, u64)> = BTreeMap::new();
        let mut now = 0u64;
        for _ in 0..100 {
            let (svc, inst) = (rng.next_u64() % 3, rng.next_u64() % 4);
            match rng.next_u64() % 4 {
                0 => {
                    let ttl = 1 + rng.next_u64() % 2000;
                    let loc = format!("h{}:{}", svc, 1 + rng.next_u64() % 9);
                    reg.register(ServiceRecord::new(
                        format!("s{svc}"),
                        format!("i{inst}"),
                        Location::parse(&loc).unwrap(),
                        Instant(now),
                        ttl,
                    ))
                    .unwrap();
                    model.insert((svc, inst), (loc, now, ttl));
                }
                1 => {
                    let live = model.get(&(svc, inst)).is_some_and(|(_, hb, ttl)| now - hb <= *ttl);
                    let ok = reg.heartbeat(&format!("s{svc}"), &format!("i{inst}"), Instant(now)).is_ok();
                    ensure(ok == live, || format!("heartbeat s{svc}/i{inst} at {now}: ok={ok}"))?;
                    match model.get_mut(&(svc, inst)) {
                        Some(rec) if live => rec.1 = now,
                        _ => {
                            model.remove(&(svc, inst));
                        }
                    }
                }
                2 => now += rng.next_u64() % 1500,
                _ => {
                    let got: Vec<String> = reg.lookup(&format!("s{svc}"), Instant(now)).iter().map(|l| l.to_string()).collect();
                    let want: Vec<String> = model
                        .iter()
                        .filter(|((s, _), (_, hb, ttl))| *s == svc && now - hb <= *ttl)
                        .map(|(_, (loc, _, _))| loc.clone())
                        .collect();
                    ensure(got == want, || format!("lookup s{svc} at {now}: {got:?} vs {want:?}"))?;
                    checks += 1;
                }
            }
        }
    }

    // round-robin fairness and equal reach for both discovery styles
    let (n, k) = (5usize, 7usize);
    let mut reg = Registry::new();
    for i in 0..n {
        reg.register(ServiceRecord::new("svc", format!("i{i}"), Location::parse(&format!("h:{}", 100 + i)).unwrap(), Instant(0), 60_000))
            .unwrap();
    }
    let mut resolver = ClientResolver::new(1_000_000);
    let mut client_side: BTreeMap<String, usize> = BTreeMap::new();
    for _ in 0..n * k {
        let loc = resolver.resolve(&reg, "svc", Instant(1)).map_err(|f| f.name)?;
        *client_side.entry(loc.to_string()).or_default() += 1;
    }
    let mut router = ServerSideRouter::new(BreakerParams::default());
    let mut server_side: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..n * k {
        let req = MessageEnvelope::request(i.to_string(), "op", Value::Null).with_api("svc");
        match router.admit(&req, &reg, Instant(1)) {
            RouterAdmission::Forward { target, pending, service } => {
                *server_side.entry(target.location.to_string()).or_default() += 1;
                router.settle(&service, &pending, Completion::Reply(req.respond(Value::Null)), Instant(1));
            }
            RouterAdmission::Settled(r) => return Err(format!("router refused: {:?}", r.envelope.fault)),
        }
    }
    ensure(client_side.len() == n && client_side.values().all(|&c| c == k), || format!("client-side counts {client_side:?}"))?;
    ensure(server_side.len() == n && server_side.values().all(|&c| c == k), || format!("server-side counts {server_side:?}"))?;
    let a: BTreeSet<_> = client_side.keys().collect();
    let b: BTreeSet<_> = server_side.keys().collect();
    ensure(a == b, || "discovery styles reach different instances".into())?;
    Ok(format!("{checks} lookups match the TTL model; {k} hits on each of {n} instances both ways"))
}

// ---------------------------------------------------------------- 9

fn backend(tag: &'static str) -> Server {
    let handler: SharedHandler = Arc::new(move |r: MessageEnvelope, _: &Peer| Some(r.respond(json!({ "from": tag }))));
    Server::bind("127.0.0.1:0", handler).unwrap()
}

fn criterion_9() -> Check {
    let shop = backend("shop");
    let mobile = backend("mobile");
    let mut gw = Gateway::new(BreakerParams::default());
    gw.deploy(Redirection::to_location("ShopAPI", "Shop", Location::Socket(shop.local_addr().to_string()), Instant(0)))
        .unwrap();
    let service = Arc::new(GatewayService::new(gw, Arc::new(SystemClock::new())));
    let front = Server::bind("127.0.0.1:0", service.clone().into_handler()).map_err(|e| e.to_string())?;
    let addr = front.local_addr().to_string();

    let stop = Arc::new(AtomicBool::new(false));
    let faults = Arc::new(AtomicUsize::new(0));
    let sent = Arc::new(AtomicUsize::new(0));
    let traffic: Vec<_> = (0..4)
        .map(|c| {
            let (addr, stop, faults, sent) = (addr.clone(), stop.clone(), faults.clone(), sent.clone());
            thread::spawn(move || {
                let fwd = SocketForwarder::new();
                let mut i = 0;
                while !stop.load(Ordering::SeqCst) {
                    let req = MessageEnvelope::request(format!("{c}-{i}"), "get", json!(i))
                        .with_api("ShopAPI")
                        .with_client(format!("client{c}"));
                    match fwd.call(&addr, &req, 2000) {
                        Completion::Reply(r) if r.payload == json!({"from": "shop"}) => {}
                        _ => {
                            faults.fetch_add(1, Ordering::SeqCst);
                        }
                    }
                    sent.fetch_add(1, Ordering::SeqCst);
                    i += 1;
                }
            })
        })
        .collect();
    thread::sleep(Duration::from_millis(100));

    let admin = SocketForwarder::new();
    let mobile_req = MessageEnvelope::request("m", "get", Value::Null).with_api("MobileAPI");
    let before = admin.call(&addr, &mobile_req, 2000);
    let deploy = MessageEnvelope::request("d", "deploy", json!({"api": "MobileAPI", "target": mobile.local_addr().to_string()}))
        .with_api(ADMIN_API);
    let ack = admin.call(&addr, &deploy, 2000);
    let after = admin.call(&addr, &mobile_req, 2000);
    let dup = admin.call(&addr, &deploy, 2000);
    thread::sleep(Duration::from_millis(100));
    stop.store(true, Ordering::SeqCst);
    for t in traffic {
        t.join().unwrap();
    }

    ensure(matches!(&before, Completion::Reply(r) if r.fault_name() == Some(NOT_FOUND)), || format!("before deploy: {before:?}"))?;
    ensure(matches!(&ack, Completion::Reply(r) if r.kind == EnvelopeKind::Response), || format!("deploy: {ack:?}"))?;
    ensure(matches!(&after, Completion::Reply(r) if r.payload == json!({"from": "mobile"})), || format!("first call after deploy: {after:?}"))?;
    ensure(matches!(&dup, Completion::Reply(r) if r.fault_name() == Some("AlreadyExists")), || format!("duplicate deploy: {dup:?}"))?;
    let (sent, faults) = (sent.load(Ordering::SeqCst), faults.load(Ordering::SeqCst));
    ensure(sent > 20 && faults == 0, || format!("{faults} faults in {sent} background calls"))?;
    Ok(format!("reachable on the first call after deploy; {sent} concurrent calls, 0 faults; duplicate rejected"))
}

// ---------------------------------------------------------------- 10

fn random_string(rng: &mut DeterministicRng, max: u64) -> String {
    const ALPHABET: &[char] = &['a', 'Z', '0', ' ', '"', '\\', '\n', '\t', 'é', '中', '😀', '\u{1}', '/', '}'];
    let len = rng.next_u64() % (max + 1);
    (0..len).map(|_| ALPHABET[(rng.next_u64() % ALPHABET.len() as u64) as usize]).collect()
}

fn random_json(rng: &mut DeterministicRng, depth: u32) -> Value {
    let pick = rng.next_u64() % if depth == 0 { 6 } else { 8 };
    match pick {
        0 => Value::Null,
        1 => Value::Bool(rng.chance(0.5)),
        2 => json!(rng.next_u64() as i64),
        3 => json!(rng.next_u64()),
        4 => json!((rng.uniform() - 0.5) * 1e9),
        5 => Value::String(random_string(rng, 10)),
        6 => Value::Array((0..rng.next_u64() % 4).map(|_| random_json(rng, depth - 1)).collect()),
        _ => Value::Object((0..rng.next_u64() % 4).map(|_| (random_string(rng, 5), random_json(rng, depth - 1))).collect()),
    }
}

fn random_envelope(rng: &mut DeterministicRng) -> MessageEnvelope {
    let op = format!("op{}", rng.next_u64() % 1000);
    let mut env = MessageEnvelope::request(random_string(rng, 8), op, random_json(rng, 3));
    if rng.chance(0.5) {
        env = env.with_api(format!("api{}", random_string(rng, 4)));
    }
    if rng.chance(0.5) {
        env = env.with_client(format!("c{}", random_string(rng, 4)));
    }
    match rng.next_u64() % 3 {
        0 => env,
        1 => env.respond(random_json(rng, 2)),
        _ => {
            let origin = [FaultOrigin::Backend, FaultOrigin::Transport][(rng.next_u64() % 2) as usize];
            let fault = FaultInfo::new(format!("F{}", rng.next_u64() % 50), random_string(rng, 12), origin);
            env.fail(fault)
        }
    }
}

fn trace_of(results: &[meshguard::interceptor::CallResult]) -> Vec<(String, Disposition, Outcome, Option<String>, Value)> {
    results
        .iter()
        .map(|r| {
            (
                r.envelope.correlation_id.clone(),
                r.disposition,
                r.outcome,
                r.envelope.fault_name().map(str::to_string),
                r.envelope.payload.clone(),
            )
        })
        .collect()
}

fn fixed_backend(req: MessageEnvelope) -> MessageEnvelope {
    let n = req.payload.as_u64().unwrap_or(0);
    if n.is_multiple_of(3) {
        req.fail(FaultInfo::backend("Flaky", format!("request {n}")))
    } else {
        req.respond(json!({ "double": n * 2 }))
    }
}

fn criterion_10() -> Check {
    let mut rng = DeterministicRng::new(10);
    for i in 0..1000 {
        let env = random_envelope(&mut rng);
        let bytes = encode(&env).map_err(|e| format!("envelope {i}: {e}"))?;
        let back = decode(&bytes).map_err(|e| format!("envelope {i}: {e}"))?;
        ensure(back == env, || format!("envelope {i} changed: {env:?} -> {back:?}"))?;
    }

    let golden = std::fs::read_to_string(repo_file("crates/core/tests/golden/frames.ndjson")).map_err(|e| e.to_string())?;
    for (i, line) in golden.lines().enumerate() {
        let env = decode(line.as_bytes()).map_err(|e| format!("golden line {}: {e}", i + 1))?;
        let again = encode(&env).map_err(|e| e.to_string())?;
        ensure(again == format!("{line}\n").into_bytes(), || format!("golden line {} re-encodes differently", i + 1))?;
    }

    let params = BreakerParams {
        trip_threshold: 0.3,
        min_request_volume: 8,
        reset_timeout_ms: 3_600_000,
        ..BreakerParams::default()
    };
    let interceptor = Interceptor::new(params.call_timeout_ms);
    let requests: Vec<_> = (0..60u64).map(|n| MessageEnvelope::request(format!("r{n}"), "double", json!(n))).collect();

    let clock = ManualClock::new();
    let mut link = InProcessLink::new(clock.clone(), |r: MessageEnvelope, _| Some(fixed_backend(r)));
    let mut cb = CircuitBreaker::new(params.clone());
    let target = TargetBinding::any("svc", Location::InProcess("svc".into()));
    let mut in_process = Vec::new();
    for req in &requests {
        clock.advance_by(1);
        in_process.push(interceptor.intercept(req, &mut cb, &target, &clock, &mut link));
    }

    let handler: SharedHandler = Arc::new(|r: MessageEnvelope, _: &Peer| Some(fixed_backend(r)));
    let server = Server::bind("127.0.0.1:0", handler).map_err(|e| e.to_string())?;
    let target = TargetBinding::any("svc", Location::Socket(server.local_addr().to_string()));
    let wall = SystemClock::new();
    let mut forwarder = SocketForwarder::new();
    let mut cb = CircuitBreaker::new(params);
    let mut socket = Vec::new();
    for req in &requests {
        socket.push(interceptor.intercept(req, &mut cb, &target, &wall as &dyn Clock, &mut forwarder));
    }
    let (a, b) = (trace_of(&in_process), trace_of(&socket));
    ensure(a == b, || {
        let i = a.iter().zip(&b).position(|(x, y)| x != y).unwrap_or(0);
        format!("traces diverge at call {i}: {:?} vs {:?}", a.get(i), b.get(i))
    })?;
    let tripped = a.iter().filter(|t| t.1 == Disposition::FailFast).count();
    ensure(tripped > 0, || "fixed scenario never tripped".into())?;
    Ok(format!(
        "1000 random round trips; {} golden frames byte-equal; socket and in-process traces equal over {} calls ({tripped} fail-fast)",
        golden.lines().count(),
        a.len()
    ))
}

// ---------------------------------------------------------------- 11

fn sim_run(seed: u64) -> Result<Vec<u8>, String> {
    let path = repo_file("scenarios/flaky.toml");
    let mut out = Vec::new();
    let mut err = Vec::new();
    let args = ["meshguard", "sim", "run", "--scenario", path.to_str().unwrap(), "--seed", &seed.to_string()];
    let code = run_command(args, &mut out, &mut err);
    ensure(code == 0, || format!("exit {code}: {}", String::from_utf8_lossy(&err)))?;
    Ok(out)
}

fn criterion_11() -> Check {
    let (a, b) = (sim_run(42)?, sim_run(42)?);
    ensure(a == b, || "two runs at seed 42 differ".into())?;
    let c = sim_run(43)?;
    let calls = |bytes: &[u8]| -> Result<Value, String> {
        let v: Value = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
        Ok(v["calls"].clone())
    };
    ensure(calls(&a)? != calls(&c)?, || "seeds 42 and 43 give the same call trace".into())?;
    Ok(format!("seed 42 twice: {} identical bytes; seed 43 differs", a.len()))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 11] = [
        ("breaker state machine conformance", criterion_1),
        ("breaker defaults at scaled parameters", criterion_2),
        ("rolling window matches replay oracle", criterion_3),
        ("trip threshold is inclusive", criterion_4),
        ("gateway dual-gate grid", criterion_5),
        ("cascade containment", criterion_6),
        ("knowledge locality and proxy aggregation", criterion_7),
        ("service discovery", criterion_8),
        ("runtime API deployment", criterion_9),
        ("transport codec and equivalence", criterion_10),
        ("simulation determinism", criterion_11),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(why) => {
                println!("criterion {n:>2} FAIL  {name}: {why}");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
