use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::time::{DurationMs, Instant};

struct Scheduled<E> {
    at: Instant,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // reversed: BinaryHeap is a max-heap and we want the earliest first
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Virtual time plus a queue of future events. Events at the same instant
/// run in the order they were scheduled.
pub struct VirtualClock<E> {
    now: Instant,
    seq: u64,
    queue: BinaryHeap<Scheduled<E>>,
}

impl<E> Default for VirtualClock<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> VirtualClock<E> {
    pub fn new() -> Self {
        Self {
            now: Instant::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> Instant {
        self.now
    }

    /// Schedules `event` at `at`; times in the past run at the current instant.
    pub fn schedule(&mut self, at: Instant, event: E) {
        let at = at.max(self.now);
        self.seq += 1;
        self.queue.push(Scheduled {
            at,
            seq: self.seq,
            event,
        });
    }

    pub fn schedule_in(&mut self, delay: DurationMs, event: E) {
        self.schedule(self.now.plus(delay), event);
    }

    /// Removes the next event and moves time to it.
    pub fn pop(&mut self) -> Option<(Instant, E)> {
        let next = self.queue.pop()?;
        self.now = next.at;
        Some((next.at, next.event))
    }

    pub fn peek_time(&self) -> Option<Instant> {
        self.queue.peek().map(|s| s.at)
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }
}
