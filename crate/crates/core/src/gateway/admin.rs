//! Control plane carried as ordinary envelopes on the `_admin` api.
//!
//! | op         | request payload                                                    | response payload |
//! |------------|--------------------------------------------------------------------|------------------|
//! | `deploy`   | `{"api", "target": "host:port"}` or `{"api", "service": "name"}`   | `{"ok":true}`    |
//! | `undeploy` | `{"api"}`                                                          | `{"ok":true}`    |
//! | `list`     | anything                                                           | `{"apis":[...]}` |
//!
//! `deploy` also accepts `"operations": [...]` to restrict a fixed target to
//! those operations, and `"breaker": {...}` to override breaker parameters.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::breaker::BreakerParams;
use crate::interceptor::{Location, TargetBinding};
use crate::model::{FaultInfo, InterfaceDescriptor, MessageEnvelope, INVALID_REQUEST};
use crate::time::Instant;

use super::{ApiListing, Gateway, Redirection, RouteTarget};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeployPayload {
    pub api: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Location>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operations: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breaker: Option<BreakerParams>,
}

impl DeployPayload {
    pub fn into_redirection(self, now: Instant) -> Result<Redirection, String> {
        let target = match (self.target, self.service) {
            (Some(location), None) => {
                let iface = match self.operations {
                    Some(ops) => InterfaceDescriptor::new(ops).map_err(|e| e.to_string())?,
                    None => InterfaceDescriptor::any(),
                };
                // the API name doubles as the service name of a fixed target
                RouteTarget::Binding(TargetBinding::new(self.api.clone(), location, &iface))
            }
            (None, Some(service)) => RouteTarget::Service(service),
            _ => return Err("deploy needs exactly one of `target` and `service`".into()),
        };
        Ok(Redirection {
            api_name: self.api,
            target,
            created_at: now,
            breaker: self.breaker,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiNamePayload {
    pub api: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListReply {
    pub apis: Vec<ApiListing>,
}

fn invalid(req: &MessageEnvelope, detail: impl Into<String>) -> MessageEnvelope {
    req.fail(FaultInfo::backend(INVALID_REQUEST, detail))
}

/// Applies one control-plane request to `gateway`.
pub fn handle(gateway: &mut Gateway, req: &MessageEnvelope, now: Instant) -> MessageEnvelope {
    match req.operation.as_str() {
        "deploy" => {
            let payload: DeployPayload = match serde_json::from_value(req.payload.clone()) {
                Ok(p) => p,
                Err(e) => return invalid(req, format!("bad deploy payload: {e}")),
            };
            let redirection = match payload.into_redirection(now) {
                Ok(r) => r,
                Err(e) => return invalid(req, e),
            };
            match gateway.deploy(redirection) {
                Ok(()) => req.respond(json!({"ok": true})),
                Err(e) => req.fail(e.to_fault()),
            }
        }
        "undeploy" => match serde_json::from_value::<ApiNamePayload>(req.payload.clone()) {
            Ok(p) => match gateway.undeploy(&p.api) {
                Ok(_) => req.respond(json!({"ok": true})),
                Err(e) => req.fail(e.to_fault()),
            },
            Err(e) => invalid(req, format!("bad undeploy payload: {e}")),
        },
        "list" => req.respond(
            serde_json::to_value(ListReply {
                apis: gateway.list(),
            })
            .expect("plain data"),
        ),
        other => invalid(req, format!("unknown admin operation `{other}`")),
    }
}
