//! Brute-force replay oracle for the rolling window.
//!
//! Keeps every recorded outcome and rescans the whole trace on each query.
//! Window membership is decided from absolute bucket numbers, and the trip
//! comparison is done in exact integer arithmetic against the decimal value
//! of the threshold, so it shares no arithmetic with the ring implementation.

#![allow(dead_code)]

use meshguard::breaker::{BreakerParams, Outcome, RollingStats};
use meshguard::time::Instant;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub successes: u64,
    pub failures: u64,
    pub timeouts: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.successes + self.failures + self.timeouts
    }
    pub fn errors(&self) -> u64 {
        self.failures + self.timeouts
    }
    fn add(&mut self, o: Outcome) {
        match o {
            Outcome::Success => self.successes += 1,
            Outcome::Failure => self.failures += 1,
            Outcome::Timeout => self.timeouts += 1,
        }
    }
}

pub struct WindowOracle {
    window_ms: u64,
    width_ms: u64,
    buckets: u64,
    events: Vec<(u64, Outcome)>,
    /// Events before this index were discarded by a reset.
    cut: usize,
}

impl WindowOracle {
    pub fn new(params: &BreakerParams) -> Self {
        let buckets = params.bucket_count as u64;
        Self {
            window_ms: params.rolling_window_ms,
            width_ms: params.rolling_window_ms / buckets,
            buckets,
            events: Vec::new(),
            cut: 0,
        }
    }

    pub fn record(&mut self, t: u64, outcome: Outcome) {
        self.events.push((t, outcome));
    }

    pub fn reset(&mut self) {
        self.cut = self.events.len();
    }

    fn live(&self) -> impl Iterator<Item = &(u64, Outcome)> {
        self.events[self.cut..].iter()
    }

    /// Counts at bucket granularity: an event is live while fewer than
    /// `bucket_count` bucket boundaries separate its bucket from `now`'s.
    pub fn counts(&self, now: u64) -> Counts {
        let mut c = Counts::default();
        for &(t, o) in self.live() {
            if t <= now && now / self.width_ms - t / self.width_ms < self.buckets {
                c.add(o);
            }
        }
        c
    }

    /// Exact sliding-window counts over events with `now - t < span`.
    pub fn exact_counts(&self, now: u64, span: u64) -> Counts {
        let mut c = Counts::default();
        for &(t, o) in self.live() {
            if t <= now && now - t < span {
                c.add(o);
            }
        }
        c
    }

    /// Lower and upper bounds implied by one bucket of expiry slack.
    pub fn granularity_bounds(&self, now: u64) -> (Counts, Counts) {
        let lower = self
            .exact_counts(now, self.window_ms.saturating_sub(self.width_ms));
        let upper = self.exact_counts(now, self.window_ms + self.width_ms);
        (lower, upper)
    }

    pub fn error_rate(&self, now: u64) -> (f64, u64) {
        let c = self.counts(now);
        if c.total() == 0 {
            (0.0, 0)
        } else {
            (c.errors() as f64 / c.total() as f64, c.total())
        }
    }

    pub fn should_trip(&self, params: &BreakerParams, now: u64) -> bool {
        let c = self.counts(now);
        if c.total() == 0 || c.total() < params.min_request_volume as u64 {
            return false;
        }
        let (num, den) = decimal_fraction(params.trip_threshold);
        (c.errors() as u128) * den >= num * (c.total() as u128)
    }
}

/// Exact rational value of the shortest decimal that round-trips to `x`.
pub fn decimal_fraction(x: f64) -> (u128, u128) {
    let s = format!("{x}");
    let (int, frac) = s.split_once('.').unwrap_or((&s, ""));
    let den = 10u128.pow(frac.len() as u32);
    let num = int.parse::<u128>().unwrap() * den + frac.parse::<u128>().unwrap_or(0);
    (num, den)
}

fn outcome_of(x: u64) -> Outcome {
    match x % 3 {
        0 => Outcome::Success,
        1 => Outcome::Failure,
        _ => Outcome::Timeout,
    }
}

/// Replays one random trace, drawn from `next`, through both the ring
/// implementation and the oracle, comparing every query point. Returns the
/// number of queries made.
pub fn check_trace(next: &mut dyn FnMut() -> u64) -> Result<usize, String> {
    let windows = [100u64, 600, 1000, 60_000];
    let bucket_counts = [1u32, 2, 5, 10];
    let window = windows[(next() % 4) as usize];
    let buckets = bucket_counts[(next() % 4) as usize];
    let params = BreakerParams {
        rolling_window_ms: window,
        bucket_count: buckets,
        min_request_volume: 1 + (next() % 12) as u32,
        trip_threshold: [0.05, 0.1, 0.25, 0.5, 1.0][(next() % 5) as usize],
        ..BreakerParams::default()
    };
    params.validate().map_err(|e| e.to_string())?;

    let mut stats = RollingStats::new(&params);
    let mut oracle = WindowOracle::new(&params);
    let mut now = 0u64;
    let events = 20 + (next() % 60) as usize;
    let mut queries = 0;
    for _ in 0..events {
        // mostly short gaps, sometimes a jump past the whole window
        now += match next() % 10 {
            0 => 0,
            9 => window + next() % (2 * window),
            _ => next() % (window / 4 + 1),
        };
        if next().is_multiple_of(50) {
            stats.reset();
            oracle.reset();
        }
        // heavily skewed towards errors so trip decisions flip often
        let outcome = outcome_of(next() % 4);
        stats.record(outcome, Instant(now));
        oracle.record(now, outcome);

        for probe in [now, now + next() % window] {
            queries += 1;
            let got = stats.totals(Instant(probe));
            let want = oracle.counts(probe);
            let ctx = || format!("at {probe} with {params:?}");
            if (got.successes, got.failures, got.timeouts)
                != (want.successes, want.failures, want.timeouts)
            {
                return Err(format!("counts {got:?} vs {want:?} {}", ctx()));
            }
            let rate = stats.error_rate(Instant(probe));
            if (rate.rate, rate.total) != oracle.error_rate(probe) {
                return Err(format!("error rate {rate:?} {}", ctx()));
            }
            if stats.should_trip(&params, Instant(probe)) != oracle.should_trip(&params, probe) {
                return Err(format!("should_trip disagrees {}", ctx()));
            }
            let (lo, hi) = oracle.granularity_bounds(probe);
            if !(lo.total() <= got.total() && got.total() <= hi.total())
                || !(lo.errors() <= got.errors() && got.errors() <= hi.errors())
            {
                return Err(format!("outside one-bucket slack {}", ctx()));
            }
        }
    }
    Ok(queries)
}
