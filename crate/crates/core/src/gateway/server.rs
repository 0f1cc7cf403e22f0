//! Gateway behind a socket listener.
//!
//! The route table and breakers live behind one mutex that is held only to
//! admit and to complete a call; the forward itself runs unlocked, so a slow
//! backend never stalls traffic to other APIs or the control plane.

use std::sync::{Arc, Mutex, MutexGuard};

use crate::interceptor::{CallResult, Forwarder};
use crate::model::MessageEnvelope;
use crate::registry::RegistryLookup;
use crate::time::Clock;
use crate::transport::{Peer, SharedHandler, SocketForwarder};

use super::{admin, Gateway, GatewayAdmission, NoDiscovery, ADMIN_API};

pub struct GatewayService {
    gateway: Arc<Mutex<Gateway>>,
    forwarder: SocketForwarder,
    clock: Arc<dyn Clock>,
    registry: Option<Arc<dyn RegistryLookup + Send + Sync>>,
    admin_enabled: bool,
}

impl GatewayService {
    pub fn new(gateway: Gateway, clock: Arc<dyn Clock>) -> Self {
        Self {
            gateway: Arc::new(Mutex::new(gateway)),
            forwarder: SocketForwarder::new(),
            clock,
            registry: None,
            admin_enabled: true,
        }
    }

    /// Resolve service-named routes through `registry`.
    pub fn with_registry(mut self, registry: Arc<dyn RegistryLookup + Send + Sync>) -> Self {
        self.registry = Some(registry);
        self
    }

    /// Serve data-plane traffic only; `_admin` requests get `NotFound`.
    pub fn without_admin(mut self) -> Self {
        self.admin_enabled = false;
        self
    }

    pub fn gateway(&self) -> MutexGuard<'_, Gateway> {
        self.gateway.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn call(&self, request: &MessageEnvelope, peer: Option<&str>) -> CallResult {
        let registry: &dyn RegistryLookup = match &self.registry {
            Some(r) => r.as_ref(),
            None => &NoDiscovery,
        };
        // Registry lookups for service routes happen inside admit; a remote
        // registry is consulted under the lock, which keeps the decision and
        // the round-robin cursor consistent.
        let admission = self
            .gateway()
            .admit(request, peer, registry, self.clock.now());
        match admission {
            GatewayAdmission::Settled { result, .. } => result,
            GatewayAdmission::Forward(ticket) => {
                let completion = self.forwarder.clone().forward(
                    &ticket.target,
                    &ticket.pending.request,
                    ticket.pending.call_timeout_ms,
                );
                self.gateway().complete(&ticket, completion, self.clock.now())
            }
        }
    }

    pub fn handle(&self, request: MessageEnvelope, peer: &Peer) -> MessageEnvelope {
        if self.admin_enabled && request.api.as_deref() == Some(ADMIN_API) {
            let now = self.clock.now();
            return admin::handle(&mut self.gateway(), &request, now);
        }
        self.call(&request, Some(&peer.addr)).envelope
    }

    pub fn into_handler(self: Arc<Self>) -> SharedHandler {
        Arc::new(move |req: MessageEnvelope, peer: &Peer| Some(self.handle(req, peer)))
    }
}
