//! Agent messages in raw wire form and decoded form, and the content
//! language that maps one onto the other.
//!
//! A [`Message`] carries its content as an ordered list of text tokens. The
//! [`ContentLanguage`] holds, per `(protocol, performative)`, the ordered
//! field list and each field's value domain. Decoding only accepts tokens in
//! canonical form, so `encode(decode(m)) == m` holds on every valid message.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ants::Booking;
use crate::fields::{MAX_PRIORITY, MIN_PRIORITY};
use crate::graph::{GraphPath, Vertex};
use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: u64,
    pub conversation: u64,
    pub sender: String,
    /// Agent id, `all`, or a path-distance scope such as `20m`.
    pub receiver: String,
    pub protocol: String,
    pub performative: String,
    pub content: Vec<String>,
}

impl Message {
    pub fn to_wire(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }

    pub fn from_wire(wire: &str) -> Result<Message, CodecError> {
        serde_json::from_str(wire).map_err(|e| CodecError::Undecodable(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentItem {
    pub name: String,
    pub value: Value,
}

/// Decoded message: content fields parsed into typed knowledge items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageData {
    pub id: u64,
    pub conversation: u64,
    pub sender: String,
    pub receiver: String,
    pub protocol: String,
    pub performative: String,
    pub content: Vec<ContentItem>,
}

impl MessageData {
    pub fn new(
        id: u64,
        conversation: u64,
        sender: impl Into<String>,
        receiver: impl Into<String>,
        protocol: &str,
        performative: &str,
        content: Vec<(&str, Value)>,
    ) -> Self {
        MessageData {
            id,
            conversation,
            sender: sender.into(),
            receiver: receiver.into(),
            protocol: protocol.to_string(),
            performative: performative.to_string(),
            content: content
                .into_iter()
                .map(|(n, v)| ContentItem { name: n.to_string(), value: v })
                .collect(),
        }
    }

    pub fn field(&self, name: &str) -> Option<&Value> {
        self.content.iter().find(|c| c.name == name).map(|c| &c.value)
    }

    pub fn text(&self, name: &str) -> Option<&str> {
        self.field(name).and_then(|v| match v {
            Value::Text(s) => Some(s.as_str()),
            _ => None,
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("undecodable transmission: {0}")]
    Undecodable(String),
}

fn malformed(msg: impl Into<String>) -> CodecError {
    CodecError::Malformed(msg.into())
}

/// Value domain of one content field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Domain {
    /// Priority level, integer 1..=5.
    Priority,
    /// Non-negative integer.
    Count,
    /// Finite non-negative number (meters, costs).
    Meters,
    /// Whitespace-free identifier.
    Ident,
    /// Graph node id.
    Node,
    /// Node sequence written `a>b>c`.
    Path,
    /// Booking record, JSON-encoded.
    Booking,
    /// One of a fixed set of words.
    OneOf(Vec<String>),
    /// Free text.
    Text,
}

fn ident_ok(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c == '>')
}

impl Domain {
    pub fn decode(&self, token: &str) -> Result<Value, CodecError> {
        let value = match self {
            Domain::Priority => {
                let p: i64 = token.parse().map_err(|_| malformed(format!("priority {token:?} is not an integer")))?;
                if !(i64::from(MIN_PRIORITY)..=i64::from(MAX_PRIORITY)).contains(&p) {
                    return Err(malformed(format!("priority {p} outside 1..5")));
                }
                Value::Int(p)
            }
            Domain::Count => {
                let n: u64 = token.parse().map_err(|_| malformed(format!("{token:?} is not a count")))?;
                Value::Int(i64::try_from(n).map_err(|_| malformed("count overflows"))?)
            }
            Domain::Meters => {
                let x: f64 = token.parse().map_err(|_| malformed(format!("{token:?} is not a number")))?;
                if !x.is_finite() || x < 0.0 {
                    return Err(malformed(format!("{token:?} is not a finite non-negative number")));
                }
                Value::Num(x)
            }
            Domain::Ident => {
                if !ident_ok(token) {
                    return Err(malformed(format!("{token:?} is not an identifier")));
                }
                Value::Text(token.to_string())
            }
            Domain::Node => {
                if !ident_ok(token) {
                    return Err(malformed(format!("{token:?} is not a node id")));
                }
                Value::Node(Vertex::from(token))
            }
            Domain::Path => {
                let nodes: Vec<&str> = token.split('>').collect();
                if nodes.iter().any(|n| !ident_ok(n)) {
                    return Err(malformed(format!("{token:?} is not a path")));
                }
                Value::Path(GraphPath::from_strs(&nodes))
            }
            Domain::Booking => {
                let b: Booking =
                    serde_json::from_str(token).map_err(|e| malformed(format!("bad booking: {e}")))?;
                b.validate().map_err(malformed)?;
                Value::Booking(b)
            }
            Domain::OneOf(words) => {
                if !words.iter().any(|w| w == token) {
                    return Err(malformed(format!("{token:?} not one of {words:?}")));
                }
                Value::Text(token.to_string())
            }
            Domain::Text => Value::Text(token.to_string()),
        };
        // Only canonical spellings decode, which keeps encoding an exact inverse.
        match self.encode(&value) {
            Ok(canon) if canon == token => Ok(value),
            _ => Err(malformed(format!("{token:?} is not in canonical form"))),
        }
    }

    pub fn encode(&self, value: &Value) -> Result<String, CodecError> {
        let bad = || malformed(format!("value {value:?} outside domain {self:?}"));
        match (self, value) {
            (Domain::Priority, Value::Int(p))
                if (i64::from(MIN_PRIORITY)..=i64::from(MAX_PRIORITY)).contains(p) =>
            {
                Ok(p.to_string())
            }
            (Domain::Count, Value::Int(n)) if *n >= 0 => Ok(n.to_string()),
            (Domain::Meters, Value::Num(x)) if x.is_finite() && *x >= 0.0 => Ok(x.to_string()),
            (Domain::Ident, Value::Text(s)) if ident_ok(s) => Ok(s.clone()),
            (Domain::Node, Value::Node(v)) if ident_ok(v.as_str()) => Ok(v.0.clone()),
            (Domain::Path, Value::Path(p)) if !p.nodes.is_empty() && p.nodes.iter().all(|n| ident_ok(n.as_str())) => {
                Ok(p.to_string())
            }
            (Domain::Booking, Value::Booking(b)) if b.validate().is_ok() => {
                Ok(serde_json::to_string(b).expect("booking serializes"))
            }
            (Domain::OneOf(words), Value::Text(s)) if words.contains(s) => Ok(s.clone()),
            (Domain::Text, Value::Text(s)) => Ok(s.clone()),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub domain: Domain,
}

/// Per `(protocol, performative)` content schemas.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContentLanguage {
    schemas: BTreeMap<String, BTreeMap<String, Vec<FieldSpec>>>,
}

impl ContentLanguage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, protocol: &str, performative: &str, fields: &[(&str, Domain)]) {
        let specs = fields
            .iter()
            .map(|(n, d)| FieldSpec { name: n.to_string(), domain: d.clone() })
            .collect();
        self.schemas
            .entry(protocol.to_string())
            .or_default()
            .insert(performative.to_string(), specs);
    }

    pub fn schema(&self, protocol: &str, performative: &str) -> Option<&[FieldSpec]> {
        self.schemas.get(protocol)?.get(performative).map(Vec::as_slice)
    }

    pub fn protocols(&self) -> impl Iterator<Item = &String> {
        self.schemas.keys()
    }

    pub fn performatives(&self, protocol: &str) -> impl Iterator<Item = (&String, &Vec<FieldSpec>)> {
        self.schemas.get(protocol).into_iter().flat_map(|m| m.iter())
    }

    fn lookup(&self, protocol: &str, performative: &str) -> Result<&[FieldSpec], CodecError> {
        let perfs = self
            .schemas
            .get(protocol)
            .ok_or_else(|| malformed(format!("unknown protocol {protocol:?}")))?;
        perfs
            .get(performative)
            .map(Vec::as_slice)
            .ok_or_else(|| malformed(format!("unknown performative {performative:?} in {protocol}")))
    }

    pub fn decode(&self, m: &Message) -> Result<MessageData, CodecError> {
        let schema = self.lookup(&m.protocol, &m.performative)?;
        if schema.len() != m.content.len() {
            return Err(malformed(format!(
                "{} expects {} content fields, got {}",
                m.performative,
                schema.len(),
                m.content.len()
            )));
        }
        let content = schema
            .iter()
            .zip(&m.content)
            .map(|(spec, token)| {
                spec.domain
                    .decode(token)
                    .map(|value| ContentItem { name: spec.name.clone(), value })
                    .map_err(|e| match e {
                        CodecError::Malformed(r) => malformed(format!("field {}: {r}", spec.name)),
                        other => other,
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MessageData {
            id: m.id,
            conversation: m.conversation,
            sender: m.sender.clone(),
            receiver: m.receiver.clone(),
            protocol: m.protocol.clone(),
            performative: m.performative.clone(),
            content,
        })
    }

    pub fn encode(&self, d: &MessageData) -> Result<Message, CodecError> {
        let schema = self.lookup(&d.protocol, &d.performative)?;
        if schema.len() != d.content.len() {
            return Err(malformed(format!("{} expects {} content fields", d.performative, schema.len())));
        }
        let content = schema
            .iter()
            .zip(&d.content)
            .map(|(spec, item)| {
                if spec.name != item.name {
                    return Err(malformed(format!("expected field {}, found {}", spec.name, item.name)));
                }
                spec.domain.encode(&item.value)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Message {
            id: d.id,
            conversation: d.conversation,
            sender: d.sender.clone(),
            receiver: d.receiver.clone(),
            protocol: d.protocol.clone(),
            performative: d.performative.clone(),
            content,
        })
    }

    pub fn validate(&self, m: &Message) -> Result<(), CodecError> {
        self.decode(m).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lang() -> ContentLanguage {
        let mut l = ContentLanguage::new();
        l.register(
            "DynCNET",
            "cfp",
            &[
                ("type", Domain::OneOf(vec!["regular".into(), "urgent".into()])),
                ("priority", Domain::Priority),
                ("location", Domain::Node),
            ],
        );
        l.register("DynCNET", "proposal", &[("cost", Domain::Meters)]);
        l
    }

    fn cfp(prio: &str) -> Message {
        Message {
            id: 77,
            conversation: 1,
            sender: "ta14".into(),
            receiver: "20m".into(),
            protocol: "DynCNET".into(),
            performative: "cfp".into(),
            content: vec!["regular".into(), prio.into(), "n60".into()],
        }
    }

    #[test]
    fn decodes_cfp_positionally() {
        let d = lang().decode(&cfp("5")).unwrap();
        assert_eq!(d.field("type"), Some(&Value::Text("regular".into())));
        assert_eq!(d.field("priority"), Some(&Value::Int(5)));
        assert_eq!(d.field("location"), Some(&Value::Node("n60".into())));
        assert_eq!(lang().encode(&d).unwrap(), cfp("5"));
    }

    #[test]
    fn out_of_domain_priority_is_malformed() {
        assert!(matches!(lang().decode(&cfp("9")), Err(CodecError::Malformed(_))));
        assert!(matches!(lang().decode(&cfp("05")), Err(CodecError::Malformed(_))));
    }

    #[test]
    fn arity_and_unknown_performative() {
        let mut m = cfp("3");
        m.content.pop();
        assert!(matches!(lang().decode(&m), Err(CodecError::Malformed(_))));
        let mut m = cfp("3");
        m.performative = "bogus".into();
        assert!(matches!(lang().decode(&m), Err(CodecError::Malformed(_))));
    }

    #[test]
    fn meters_canonical() {
        assert_eq!(Domain::Meters.decode("250").unwrap(), Value::Num(250.0));
        assert_eq!(Domain::Meters.decode("12.5").unwrap(), Value::Num(12.5));
        assert!(Domain::Meters.decode("250.0").is_err());
        assert!(Domain::Meters.decode("-1").is_err());
        assert!(Domain::Meters.decode("NaN").is_err());
    }

    #[test]
    fn wire_round_trip() {
        let m = cfp("4");
        assert_eq!(Message::from_wire(&m.to_wire()).unwrap(), m);
        assert!(matches!(Message::from_wire("{not json"), Err(CodecError::Undecodable(_))));
    }
}
