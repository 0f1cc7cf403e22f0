use std::collections::HashMap;

use crate::breaker::{BreakerParams, CircuitBreaker};

pub const DEFAULT_CLIENT_BREAKER_CAP: usize = 1024;

/// Breakers created on first use, least recently used evicted past `cap`.
#[derive(Debug, Clone)]
pub struct BreakerCache {
    cap: usize,
    tick: u64,
    entries: HashMap<String, (u64, CircuitBreaker)>,
    evicted: u64,
}

impl BreakerCache {
    pub fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            tick: 0,
            entries: HashMap::new(),
            evicted: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn evicted(&self) -> u64 {
        self.evicted
    }

    pub fn get(&self, key: &str) -> Option<&CircuitBreaker> {
        self.entries.get(key).map(|(_, cb)| cb)
    }

    /// The breaker for `key`, created with `params` if absent.
    pub fn get_or_create(&mut self, key: &str, params: &BreakerParams) -> &mut CircuitBreaker {
        self.tick += 1;
        let tick = self.tick;
        if !self.entries.contains_key(key) {
            if self.entries.len() >= self.cap {
                let oldest = self
                    .entries
                    .iter()
                    .min_by_key(|(_, (t, _))| *t)
                    .map(|(k, _)| k.clone())
                    .expect("cap >= 1");
                self.entries.remove(&oldest);
                self.evicted += 1;
            }
            self.entries
                .insert(key.to_string(), (tick, CircuitBreaker::new(params.clone())));
        }
        let entry = self.entries.get_mut(key).expect("present");
        entry.0 = tick;
        &mut entry.1
    }

    /// Entries sorted by key.
    pub fn iter_sorted(&self) -> Vec<(&str, &CircuitBreaker)> {
        let mut v: Vec<_> = self
            .entries
            .iter()
            .map(|(k, (_, cb))| (k.as_str(), cb))
            .collect();
        v.sort_by_key(|(k, _)| *k);
        v
    }
}
