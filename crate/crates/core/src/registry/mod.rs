//! Service registry with TTL liveness, plus both discovery styles.
//!
//! Instances `register` their location and keep it alive with heartbeats. A
//! record whose last heartbeat is more than `ttl_ms` old is dead: lookups
//! skip it, and the next mutation removes it. Lookups never write, so they
//! can run concurrently behind a read lock.

mod resolver;
mod router;
pub mod wire;

pub use resolver::{ClientResolver, DEFAULT_CACHE_TTL_MS};
pub use router::{RouterAdmission, ServerSideRouter};

use std::collections::BTreeMap;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interceptor::Location;
use crate::time::{DurationMs, Instant};

pub const DEFAULT_TTL_MS: DurationMs = 30_000;
pub const DEFAULT_HEARTBEAT_MS: DurationMs = 10_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("no instance `{instance_id}` registered for `{service_name}`")]
    NotFound {
        service_name: String,
        instance_id: String,
    },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceRecord {
    pub service_name: String,
    pub instance_id: String,
    pub location: Location,
    pub registered_at: Instant,
    pub ttl_ms: DurationMs,
    pub last_heartbeat: Instant,
}

impl ServiceRecord {
    pub fn new(
        service_name: impl Into<String>,
        instance_id: impl Into<String>,
        location: Location,
        now: Instant,
        ttl_ms: DurationMs,
    ) -> Self {
        Self {
            service_name: service_name.into(),
            instance_id: instance_id.into(),
            location,
            registered_at: now,
            ttl_ms,
            last_heartbeat: now,
        }
    }

    pub fn is_live(&self, now: Instant) -> bool {
        now.since(self.last_heartbeat) <= self.ttl_ms
    }

    fn validate(&self) -> Result<(), RegistryError> {
        let bad = |m: &str| Err(RegistryError::InvalidRecord(m.to_string()));
        if self.service_name.is_empty() {
            return bad("service name is empty");
        }
        if self.instance_id.is_empty() {
            return bad("instance id is empty");
        }
        if self.ttl_ms == 0 {
            return bad("ttl must be positive");
        }
        if self.last_heartbeat < self.registered_at {
            return bad("last heartbeat precedes registration");
        }
        Ok(())
    }
}

/// Read access to live service locations.
pub trait RegistryLookup {
    /// Live locations of `service_name`, ordered by instance id.
    fn lookup(&self, service_name: &str, now: Instant) -> Vec<Location>;
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    records: BTreeMap<String, BTreeMap<String, ServiceRecord>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `rec`, replacing any record with the same name and instance.
    pub fn register(&mut self, rec: ServiceRecord) -> Result<(), RegistryError> {
        rec.validate()?;
        self.purge_expired(rec.last_heartbeat);
        self.records
            .entry(rec.service_name.clone())
            .or_default()
            .insert(rec.instance_id.clone(), rec);
        Ok(())
    }

    /// Refreshes a live record. Expired records must register again.
    pub fn heartbeat(
        &mut self,
        service_name: &str,
        instance_id: &str,
        now: Instant,
    ) -> Result<(), RegistryError> {
        self.purge_expired(now);
        match self
            .records
            .get_mut(service_name)
            .and_then(|m| m.get_mut(instance_id))
        {
            Some(rec) => {
                rec.last_heartbeat = rec.last_heartbeat.max(now);
                Ok(())
            }
            None => Err(RegistryError::NotFound {
                service_name: service_name.to_string(),
                instance_id: instance_id.to_string(),
            }),
        }
    }

    pub fn deregister(&mut self, service_name: &str, instance_id: &str) -> bool {
        let Some(instances) = self.records.get_mut(service_name) else {
            return false;
        };
        let removed = instances.remove(instance_id).is_some();
        if instances.is_empty() {
            self.records.remove(service_name);
        }
        removed
    }

    /// Live records of `service_name`, ordered by instance id.
    pub fn live_records(&self, service_name: &str, now: Instant) -> Vec<&ServiceRecord> {
        self.records
            .get(service_name)
            .into_iter()
            .flat_map(|m| m.values())
            .filter(|r| r.is_live(now))
            .collect()
    }

    /// Drops every record that is dead at `now`.
    pub fn purge_expired(&mut self, now: Instant) -> usize {
        let mut purged = 0;
        self.records.retain(|_, instances| {
            let before = instances.len();
            instances.retain(|_, r| r.is_live(now));
            purged += before - instances.len();
            !instances.is_empty()
        });
        purged
    }

    /// Number of stored records, live or not yet purged.
    pub fn stored(&self) -> usize {
        self.records.values().map(BTreeMap::len).sum()
    }

    pub fn services(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }
}

impl RegistryLookup for Registry {
    fn lookup(&self, service_name: &str, now: Instant) -> Vec<Location> {
        self.live_records(service_name, now)
            .into_iter()
            .map(|r| r.location.clone())
            .collect()
    }
}

impl RegistryLookup for RwLock<Registry> {
    fn lookup(&self, service_name: &str, now: Instant) -> Vec<Location> {
        self.read()
            .unwrap_or_else(|p| p.into_inner())
            .lookup(service_name, now)
    }
}

impl<T: RegistryLookup + ?Sized> RegistryLookup for &T {
    fn lookup(&self, service_name: &str, now: Instant) -> Vec<Location> {
        (**self).lookup(service_name, now)
    }
}

impl<T: RegistryLookup + ?Sized> RegistryLookup for std::sync::Arc<T> {
    fn lookup(&self, service_name: &str, now: Instant) -> Vec<Location> {
        (**self).lookup(service_name, now)
    }
}
