//! Millisecond time used by every component.
//!
//! All durations are integer milliseconds so that deterministic tests can
//! compare timestamps with exact equality. An [`Instant`] is only meaningful
//! relative to the [`Clock`] that produced it.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Length of an interval in milliseconds.
pub type DurationMs = u64;

/// A point in time, in milliseconds since the origin of its clock.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Instant(pub u64);

impl Instant {
    pub const ZERO: Instant = Instant(0);

    pub fn from_millis(ms: u64) -> Self {
        Instant(ms)
    }

    pub fn as_millis(self) -> u64 {
        self.0
    }

    pub fn plus(self, ms: DurationMs) -> Instant {
        Instant(self.0.saturating_add(ms))
    }

    /// Milliseconds elapsed from `earlier` to `self`, zero if `earlier` is later.
    pub fn since(self, earlier: Instant) -> DurationMs {
        self.0.saturating_sub(earlier.0)
    }
}

impl fmt::Display for Instant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

/// Source of monotone non-decreasing time readings.
pub trait Clock: Send + Sync {
    fn now(&self) -> Instant;
}

/// Wall-clock time measured from the moment the clock was created.
#[derive(Debug, Clone)]
pub struct SystemClock {
    origin: std::time::Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self {
            origin: std::time::Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Instant {
        Instant(self.origin.elapsed().as_millis() as u64)
    }
}

/// A clock that only moves when told to. Clones share the same reading.
#[derive(Debug, Clone, Default)]
pub struct ManualClock {
    now: Arc<AtomicU64>,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(t: Instant) -> Self {
        Self {
            now: Arc::new(AtomicU64::new(t.0)),
        }
    }

    /// Moves the clock forward to `t`. Earlier targets are ignored.
    pub fn advance_to(&self, t: Instant) {
        self.now.fetch_max(t.0, Ordering::SeqCst);
    }

    pub fn advance_by(&self, ms: DurationMs) {
        self.now.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Instant {
        Instant(self.now.load(Ordering::SeqCst))
    }
}
