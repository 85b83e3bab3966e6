//! Structured task payloads with a canonical, order-stable text encoding.
//!
//! A payload is a string-keyed map of integers, strings, booleans, nested maps,
//! and lists. The canonical encoding is compact JSON with keys sorted
//! lexicographically at every level, so equal payloads always encode to equal
//! bytes — the property the durable log, idempotency digests, and cross-process
//! provers rely on. Floats are deliberately excluded from the value model to
//! keep the encoding exact and round-trips lossless.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// A single payload value. Maps use `BTreeMap` so any serialized form is
/// automatically key-sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Str(String),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<u32> for Value {
    fn from(v: u32) -> Self {
        Value::Int(v as i64)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Str(v)
    }
}

impl From<Vec<Value>> for Value {
    fn from(v: Vec<Value>) -> Self {
        Value::List(v)
    }
}

impl From<BTreeMap<String, Value>> for Value {
    fn from(v: BTreeMap<String, Value>) -> Self {
        Value::Map(v)
    }
}

impl From<Payload> for Value {
    fn from(p: Payload) -> Self {
        Value::Map(p.0)
    }
}

#[derive(Debug, Error)]
pub enum PayloadError {
    /// The text is not a canonical payload document (not a JSON object, or it
    /// contains values outside the supported model, e.g. floats or nulls).
    #[error("unparseable payload document: {0}")]
    Parse(String),
}

/// An ordered string-keyed document carried by every bus message.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Payload(BTreeMap<String, Value>);

impl Payload {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builder-style insert, convenient for literals in tests and examples.
    pub fn with(mut self, key: impl Into<String>, value: impl Into<Value>) -> Self {
        self.0.insert(key.into(), value.into());
        self
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<Value>) {
        self.0.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.0.get(key)
    }

    pub fn get_int(&self, key: &str) -> Option<i64> {
        match self.0.get(key) {
            Some(Value::Int(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        match self.0.get(key) {
            Some(Value::Str(v)) => Some(v.as_str()),
            _ => None,
        }
    }

    pub fn get_bool(&self, key: &str) -> Option<bool> {
        match self.0.get(key) {
            Some(Value::Bool(v)) => Some(*v),
            _ => None,
        }
    }

    /// The application-level task identity, when the producer supplied one.
    pub fn task_id(&self) -> Option<&str> {
        self.get_str("task_id")
    }

    pub fn entries(&self) -> &BTreeMap<String, Value> {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Canonical encoding: compact JSON with sorted keys at every level.
    /// Equal payloads encode to identical byte strings.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("payload serialization cannot fail")
    }

    pub fn from_canonical(text: &str) -> Result<Self, PayloadError> {
        serde_json::from_str(text).map_err(|e| PayloadError::Parse(e.to_string()))
    }

    /// Approximate resident size, used for buffer accounting and the publish
    /// size cap. Defined as the canonical encoding length.
    pub fn approx_bytes(&self) -> usize {
        self.canonical().len()
    }

    /// SHA-256 of the canonical encoding, hex-encoded. Used as the output
    /// digest in idempotency records.
    pub fn digest_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        let out = h.finalize();
        let mut s = String::with_capacity(64);
        for b in out {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

impl FromIterator<(String, Value)> for Payload {
    fn from_iter<T: IntoIterator<Item = (String, Value)>>(iter: T) -> Self {
        Payload(iter.into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_sorts_keys_at_every_level() {
        let nested: BTreeMap<String, Value> = [
            ("z".to_string(), Value::Int(1)),
            ("a".to_string(), Value::Int(2)),
        ]
        .into_iter()
        .collect();
        let p = Payload::new()
            .with("beta", 1i64)
            .with("alpha", "x")
            .with("nested", nested);
        assert_eq!(
            p.canonical(),
            r#"{"alpha":"x","beta":1,"nested":{"a":2,"z":1}}"#
        );
    }

    #[test]
    fn canonical_is_insertion_order_independent() {
        let a = Payload::new().with("x", 1i64).with("y", 2i64);
        let b = Payload::new().with("y", 2i64).with("x", 1i64);
        assert_eq!(a.canonical(), b.canonical());
        assert_eq!(a.digest_hex(), b.digest_hex());
    }

    #[test]
    fn floats_and_nulls_are_rejected() {
        assert!(Payload::from_canonical(r#"{"x":1.5}"#).is_err());
        assert!(Payload::from_canonical(r#"{"x":null}"#).is_err());
        assert!(Payload::from_canonical(r#"[1,2]"#).is_err());
    }

    #[test]
    fn typed_accessors() {
        let p = Payload::new()
            .with("n", 7i64)
            .with("s", "hello")
            .with("b", true)
            .with("task_id", "t-1");
        assert_eq!(p.get_int("n"), Some(7));
        assert_eq!(p.get_str("s"), Some("hello"));
        assert_eq!(p.get_bool("b"), Some(true));
        assert_eq!(p.task_id(), Some("t-1"));
        assert_eq!(p.get_int("s"), None);
        assert_eq!(p.get("missing"), None);
    }

    fn arb_value(depth: u32) -> BoxedStrategy<Value> {
        let leaf = prop_oneof![
            any::<bool>().prop_map(Value::Bool),
            any::<i64>().prop_map(Value::Int),
            "[a-zA-Z0-9 _.-]{0,12}".prop_map(Value::Str),
        ];
        if depth == 0 {
            leaf.boxed()
        } else {
            prop_oneof![
                3 => leaf,
                1 => prop::collection::vec(arb_value(depth - 1), 0..4).prop_map(Value::List),
                1 => prop::collection::btree_map("[a-z]{1,6}", arb_value(depth - 1), 0..4)
                    .prop_map(Value::Map),
            ]
            .boxed()
        }
    }

    proptest! {
        /// Canonical round-trip is lossless for every representable payload.
        #[test]
        fn round_trip_lossless(entries in prop::collection::btree_map("[a-z_]{1,8}", arb_value(2), 0..6)) {
            let p = Payload(entries);
            let text = p.canonical();
            let back = Payload::from_canonical(&text).expect("canonical text must parse");
            prop_assert_eq!(&back, &p);
            prop_assert_eq!(back.canonical(), text);
        }
    }
}
