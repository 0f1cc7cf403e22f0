//! Bucketed rolling window of call outcomes.
//!
//! Time is cut into buckets of `rolling_window_ms / bucket_count` aligned to
//! the clock origin. A query at `now` sums the `bucket_count` most recent
//! buckets, the one containing `now` included, so an outcome expires at the
//! first bucket boundary at least one window after it was recorded.

use serde::Serialize;

use super::{BreakerParams, Outcome};
use crate::time::Instant;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BucketCounts {
    pub successes: u64,
    pub failures: u64,
    pub timeouts: u64,
}

impl BucketCounts {
    pub fn total(&self) -> u64 {
        self.successes + self.failures + self.timeouts
    }

    pub fn errors(&self) -> u64 {
        self.failures + self.timeouts
    }

    fn add(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::Success => self.successes += 1,
            Outcome::Failure => self.failures += 1,
            Outcome::Timeout => self.timeouts += 1,
        }
    }

    fn merge(&mut self, other: &BucketCounts) {
        self.successes += other.successes;
        self.failures += other.failures;
        self.timeouts += other.timeouts;
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Bucket {
    /// Absolute bucket number (`t / bucket_width`) this slot currently holds.
    epoch: u64,
    counts: BucketCounts,
}

/// Error rate over the live window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorRate {
    pub rate: f64,
    pub total: u64,
}

#[derive(Debug, Clone)]
pub struct RollingStats {
    buckets: Vec<Bucket>,
    bucket_width_ms: u64,
    /// Epoch of the newest bucket written, `None` when empty.
    window_anchor: Option<u64>,
}

impl RollingStats {
    pub fn new(params: &BreakerParams) -> Self {
        let count = params.bucket_count.max(1) as usize;
        Self {
            buckets: vec![Bucket::default(); count],
            bucket_width_ms: params.bucket_width_ms(),
            window_anchor: None,
        }
    }

    pub fn bucket_width_ms(&self) -> u64 {
        self.bucket_width_ms
    }

    /// Start time of the newest bucket that holds data.
    pub fn window_anchor(&self) -> Option<Instant> {
        self.window_anchor.map(|e| Instant(e * self.bucket_width_ms))
    }

    fn epoch_of(&self, t: Instant) -> u64 {
        t.0 / self.bucket_width_ms
    }

    pub fn record(&mut self, outcome: Outcome, now: Instant) {
        let epoch = self.epoch_of(now);
        let n = self.buckets.len() as u64;
        let slot = &mut self.buckets[(epoch % n) as usize];
        if slot.epoch != epoch || slot.counts.total() == 0 {
            *slot = Bucket {
                epoch,
                counts: BucketCounts::default(),
            };
        }
        slot.counts.add(outcome);
        self.window_anchor = Some(self.window_anchor.map_or(epoch, |a| a.max(epoch)));
    }

    pub fn reset(&mut self) {
        self.buckets.fill(Bucket::default());
        self.window_anchor = None;
    }

    /// Sum of all buckets still inside the window at `now`.
    pub fn totals(&self, now: Instant) -> BucketCounts {
        let current = self.epoch_of(now);
        let n = self.buckets.len() as u64;
        let mut sum = BucketCounts::default();
        for b in &self.buckets {
            if b.counts.total() > 0 && b.epoch <= current && current - b.epoch < n {
                sum.merge(&b.counts);
            }
        }
        sum
    }

    pub fn error_rate(&self, now: Instant) -> ErrorRate {
        let totals = self.totals(now);
        let total = totals.total();
        let rate = if total == 0 {
            0.0
        } else {
            totals.errors() as f64 / total as f64
        };
        ErrorRate { rate, total }
    }

    /// True iff the window holds at least `min_request_volume` outcomes and
    /// the error rate is at or above `trip_threshold`.
    pub fn should_trip(&self, params: &BreakerParams, now: Instant) -> bool {
        let ErrorRate { rate, total } = self.error_rate(now);
        // Both sides are correctly rounded, so an exact match such as 5/100
        // against 0.05 compares equal.
        total >= params.min_request_volume as u64 && total > 0 && rate >= params.trip_threshold
    }
}
