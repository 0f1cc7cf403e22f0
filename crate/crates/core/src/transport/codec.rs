//! Newline-delimited frame format.
//!
//! Each envelope is one line of compact JSON with keys in a fixed order:
//!
//! ```text
//! {"v":1,"id":"1","kind":"req","op":"ping","api":"Shop","client":"c1","payload":{},"fault":{...}}
//! ```
//!
//! `api`, `client` and `fault` are left out when absent. Decoding ignores
//! unknown keys so newer peers can add fields.

use std::io::{self, BufRead};

use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;
use tracing::warn;

use crate::model::{EnvelopeKind, FaultInfo, FaultOrigin, MessageEnvelope, ModelError};

pub const WIRE_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("envelope is invalid: {0}")]
    Invalid(#[from] ModelError),
    #[error("payload cannot be serialized: {0}")]
    Payload(#[from] serde_json::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("malformed frame at line {line}, column {column}: {message}")]
    Malformed {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(String),
    #[error("frame is missing field `{0}`")]
    MissingField(&'static str),
    #[error("frame field `{field}` is invalid: {message}")]
    InvalidField {
        field: &'static str,
        message: String,
    },
    #[error("frame violates envelope rules: {0}")]
    Invalid(ModelError),
}

fn kind_tag(kind: EnvelopeKind) -> &'static str {
    match kind {
        EnvelopeKind::Request => "req",
        EnvelopeKind::Response => "res",
        EnvelopeKind::Fault => "fault",
    }
}

#[derive(Serialize)]
struct FaultFrame<'a> {
    name: &'a str,
    detail: &'a str,
    origin: FaultOrigin,
}

// Field order here is the wire order.
#[derive(Serialize)]
struct FrameOut<'a> {
    v: u64,
    id: &'a str,
    kind: &'static str,
    op: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    api: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    client: Option<&'a str>,
    payload: &'a Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    fault: Option<FaultFrame<'a>>,
}

/// Serializes `env` as one frame, newline included.
pub fn encode(env: &MessageEnvelope) -> Result<Vec<u8>, EncodeError> {
    env.validate()?;
    let frame = FrameOut {
        v: WIRE_VERSION,
        id: &env.correlation_id,
        kind: kind_tag(env.kind),
        op: &env.operation,
        api: env.api.as_deref(),
        client: env.client_id.as_deref(),
        payload: &env.payload,
        fault: env.fault.as_ref().map(|f| FaultFrame {
            name: &f.name,
            detail: &f.detail,
            origin: f.origin,
        }),
    };
    let mut out = serde_json::to_vec(&frame)?;
    out.push(b'\n');
    Ok(out)
}

fn take_string(map: &mut Map<String, Value>, field: &'static str) -> Result<String, DecodeError> {
    match map.remove(field) {
        None => Err(DecodeError::MissingField(field)),
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(DecodeError::InvalidField {
            field,
            message: format!("expected a string, got {other}"),
        }),
    }
}

fn take_opt_string(
    map: &mut Map<String, Value>,
    field: &'static str,
) -> Result<Option<String>, DecodeError> {
    match map.remove(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(other) => Err(DecodeError::InvalidField {
            field,
            message: format!("expected a string, got {other}"),
        }),
    }
}

fn decode_fault(value: Value) -> Result<FaultInfo, DecodeError> {
    let Value::Object(mut map) = value else {
        return Err(DecodeError::InvalidField {
            field: "fault",
            message: "expected an object".into(),
        });
    };
    let name = take_string(&mut map, "name")?;
    let detail = take_opt_string(&mut map, "detail")?.unwrap_or_default();
    let origin = match map.remove("origin") {
        None => return Err(DecodeError::MissingField("origin")),
        Some(v) => serde_json::from_value::<FaultOrigin>(v).map_err(|e| DecodeError::InvalidField {
            field: "origin",
            message: e.to_string(),
        })?,
    };
    Ok(FaultInfo::new(name, detail, origin))
}

/// Parses one frame. A trailing `\n` or `\r\n` is accepted.
pub fn decode(line: &[u8]) -> Result<MessageEnvelope, DecodeError> {
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    let line = line.strip_suffix(b"\r").unwrap_or(line);
    let value: Value = serde_json::from_slice(line).map_err(|e| DecodeError::Malformed {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let Value::Object(mut map) = value else {
        return Err(DecodeError::Malformed {
            line: 1,
            column: 1,
            message: "frame must be an object".into(),
        });
    };
    match map.remove("v") {
        None => return Err(DecodeError::MissingField("v")),
        Some(v) if v.as_u64() == Some(WIRE_VERSION) => {}
        Some(v) => return Err(DecodeError::UnsupportedVersion(v.to_string())),
    }
    let correlation_id = take_string(&mut map, "id")?;
    let kind = match take_string(&mut map, "kind")?.as_str() {
        "req" => EnvelopeKind::Request,
        "res" => EnvelopeKind::Response,
        "fault" => EnvelopeKind::Fault,
        other => {
            return Err(DecodeError::InvalidField {
                field: "kind",
                message: format!("unknown kind `{other}`"),
            })
        }
    };
    let operation = take_string(&mut map, "op")?;
    let api = take_opt_string(&mut map, "api")?;
    let client_id = take_opt_string(&mut map, "client")?;
    let payload = map.remove("payload").ok_or(DecodeError::MissingField("payload"))?;
    let fault = match map.remove("fault") {
        None | Some(Value::Null) => None,
        Some(v) => Some(decode_fault(v)?),
    };
    let env = MessageEnvelope {
        correlation_id,
        kind,
        operation,
        api,
        client_id,
        payload,
        fault,
    };
    env.validate().map_err(DecodeError::Invalid)?;
    Ok(env)
}

/// Reads frames from a byte stream, skipping lines that fail to decode.
pub struct FrameReader<R> {
    inner: R,
    buf: Vec<u8>,
    skipped: u64,
}

impl<R: BufRead> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            buf: Vec::new(),
            skipped: 0,
        }
    }

    /// Lines dropped so far because they did not decode.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Next valid envelope, or `None` at end of stream.
    pub fn next_envelope(&mut self) -> io::Result<Option<MessageEnvelope>> {
        loop {
            self.buf.clear();
            if self.inner.read_until(b'\n', &mut self.buf)? == 0 {
                return Ok(None);
            }
            if self.buf.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            match decode(&self.buf) {
                Ok(env) => return Ok(Some(env)),
                Err(e) => {
                    self.skipped += 1;
                    warn!(error = %e, skipped = self.skipped, "dropping undecodable frame");
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn key_order_and_omission() {
        let env = MessageEnvelope::request("1", "ping", json!({}));
        let bytes = encode(&env).unwrap();
        assert_eq!(
            std::str::from_utf8(&bytes).unwrap(),
            "{\"v\":1,\"id\":\"1\",\"kind\":\"req\",\"op\":\"ping\",\"payload\":{}}\n"
        );
    }

    #[test]
    fn fault_without_info_cannot_be_encoded() {
        let mut env = MessageEnvelope::request("1", "x", Value::Null);
        env.kind = EnvelopeKind::Fault;
        assert!(matches!(encode(&env), Err(EncodeError::Invalid(_))));
    }

    #[test]
    fn version_two_rejected() {
        let err = decode(br#"{"v":2,"id":"1","kind":"req","op":"x","payload":null}"#).unwrap_err();
        assert_eq!(err, DecodeError::UnsupportedVersion("2".into()));
    }

    #[test]
    fn truncated_line_is_malformed() {
        let err = decode(br#"{"v":1,"id":"1","ki"#).unwrap_err();
        assert!(matches!(err, DecodeError::Malformed { line: 1, .. }), "{err:?}");
    }

    #[test]
    fn missing_field_is_named() {
        let err = decode(br#"{"v":1,"kind":"req","op":"x","payload":null}"#).unwrap_err();
        assert_eq!(err, DecodeError::MissingField("id"));
    }

    #[test]
    fn unknown_fields_ignored() {
        let env = decode(br#"{"v":1,"id":"1","kind":"res","op":"x","payload":3,"trace":"abc"}"#)
            .unwrap();
        assert_eq!(env.payload, json!(3));
    }

    #[test]
    fn fault_kind_requires_fault_object() {
        let err = decode(br#"{"v":1,"id":"1","kind":"fault","op":"x","payload":null}"#).unwrap_err();
        assert!(matches!(err, DecodeError::Invalid(_)));
    }

    #[test]
    fn newlines_in_strings_stay_escaped() {
        let env = MessageEnvelope::request("a\nb", "op", json!({"text": "x\ny"}));
        let bytes = encode(&env).unwrap();
        assert_eq!(bytes.iter().filter(|b| **b == b'\n').count(), 1);
        assert_eq!(decode(&bytes).unwrap(), env);
    }

    #[test]
    fn reader_skips_and_counts_bad_lines() {
        let good = MessageEnvelope::request("1", "a", json!(1));
        let mut input = Vec::new();
        input.extend_from_slice(b"not json\n");
        input.extend_from_slice(&encode(&good).unwrap());
        input.extend_from_slice(b"\n{\"v\":9}\n");
        input.extend_from_slice(&encode(&good.respond(json!(2))).unwrap());
        let mut reader = FrameReader::new(&input[..]);
        assert_eq!(reader.next_envelope().unwrap(), Some(good.clone()));
        assert_eq!(reader.next_envelope().unwrap(), Some(good.respond(json!(2))));
        assert_eq!(reader.next_envelope().unwrap(), None);
        assert_eq!(reader.skipped(), 2);
    }
}
