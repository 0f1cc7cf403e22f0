use std::collections::HashMap;

use crate::interceptor::Location;
use crate::model::{FaultInfo, FaultOrigin, SERVICE_UNAVAILABLE};
use crate::time::{DurationMs, Instant};

use super::RegistryLookup;

pub const DEFAULT_CACHE_TTL_MS: DurationMs = 5_000;

#[derive(Debug, Clone)]
struct Cached {
    fetched_at: Instant,
    locations: Vec<Location>,
}

/// Client-side discovery: the caller asks the registry itself, caches the
/// answer for `cache_ttl_ms` and spreads calls round-robin.
#[derive(Debug, Clone)]
pub struct ClientResolver {
    cache_ttl_ms: DurationMs,
    cache: HashMap<String, Cached>,
    cursor: HashMap<String, usize>,
    lookups: u64,
}

impl Default for ClientResolver {
    fn default() -> Self {
        Self::new(DEFAULT_CACHE_TTL_MS)
    }
}

impl ClientResolver {
    pub fn new(cache_ttl_ms: DurationMs) -> Self {
        Self {
            cache_ttl_ms,
            cache: HashMap::new(),
            cursor: HashMap::new(),
            lookups: 0,
        }
    }

    /// Registry queries issued so far.
    pub fn lookups(&self) -> u64 {
        self.lookups
    }

    pub fn invalidate(&mut self, service_name: &str) {
        self.cache.remove(service_name);
    }

    fn instances(
        &mut self,
        registry: &dyn RegistryLookup,
        service_name: &str,
        now: Instant,
    ) -> &[Location] {
        let fresh = self
            .cache
            .get(service_name)
            .is_some_and(|c| now.since(c.fetched_at) < self.cache_ttl_ms);
        if !fresh {
            self.lookups += 1;
            let locations = registry.lookup(service_name, now);
            if locations.is_empty() {
                // don't remember an outage
                self.cache.remove(service_name);
                return &[];
            }
            self.cache.insert(
                service_name.to_string(),
                Cached {
                    fetched_at: now,
                    locations,
                },
            );
        }
        &self.cache[service_name].locations
    }

    /// Next instance of `service_name`, round-robin over the cached list.
    pub fn resolve(
        &mut self,
        registry: &dyn RegistryLookup,
        service_name: &str,
        now: Instant,
    ) -> Result<Location, FaultInfo> {
        let n = self.instances(registry, service_name, now).len();
        if n == 0 {
            return Err(FaultInfo::new(
                SERVICE_UNAVAILABLE,
                format!("no live instance of {service_name}"),
                FaultOrigin::Transport,
            ));
        }
        let cursor = self.cursor.entry(service_name.to_string()).or_insert(0);
        let idx = *cursor % n;
        *cursor = cursor.wrapping_add(1);
        Ok(self.cache[service_name].locations[idx].clone())
    }
}
