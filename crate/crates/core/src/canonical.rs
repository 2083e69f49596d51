//! Canonical encoding of structured values.
//!
//! The encoding is a strict JSON subset and defines every hash in the system:
//!
//! * map keys sorted by code point, no insignificant whitespace;
//! * strings escape only `"`, `\` and control characters (`\b \f \n \r \t`,
//!   otherwise `\u00xx` with lowercase hex);
//! * integers in base 10, floats in shortest round-trip form that always
//!   contains a `.` or an exponent, so they never decode as integers;
//! * timestamps as `YYYY-MM-DDTHH:MM:SS.mmmZ` strings.
//!
//! Non-finite floats cannot be encoded. Decoding is schema-free, so a
//! timestamp comes back as a string; typed layers re-parse it.

use std::collections::BTreeMap;
use std::fmt;

use crate::hash::{InvalidHash, ObjectHash};
use crate::time::{Timestamp, TimestampError};

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    String(String),
    Timestamp(Timestamp),
    Array(Vec<Value>),
    Map(BTreeMap<String, Value>),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CanonicalError {
    #[error("unsupported value: {0}")]
    UnsupportedValue(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("malformed canonical bytes: {0}")]
    Syntax(String),
    #[error("field {path}: {message}")]
    Field { path: String, message: String },
}

impl DecodeError {
    pub fn field(path: impl Into<String>, message: impl Into<String>) -> Self {
        DecodeError::Field { path: path.into(), message: message.into() }
    }
}

/// Encodes `value` into its canonical bytes.
pub fn canonicalize(value: &Value) -> Result<Vec<u8>, CanonicalError> {
    let mut out = Vec::with_capacity(64);
    write_value(&mut out, value)?;
    Ok(out)
}

/// Canonical bytes plus a trailing newline; the record-line form.
pub fn canonicalize_line(value: &Value) -> Result<Vec<u8>, CanonicalError> {
    let mut out = canonicalize(value)?;
    out.push(b'\n');
    Ok(out)
}

/// Hash of the canonical encoding of `value`.
pub fn hash_value(value: &Value) -> Result<ObjectHash, CanonicalError> {
    Ok(ObjectHash::of(&canonicalize(value)?))
}

fn write_value(out: &mut Vec<u8>, value: &Value) -> Result<(), CanonicalError> {
    match value {
        Value::Null => out.extend_from_slice(b"null"),
        Value::Bool(true) => out.extend_from_slice(b"true"),
        Value::Bool(false) => out.extend_from_slice(b"false"),
        Value::Int(i) => out.extend_from_slice(i.to_string().as_bytes()),
        Value::Float(f) => {
            if !f.is_finite() {
                return Err(CanonicalError::UnsupportedValue(format!("non-finite float {f}")));
            }
            let mut buf = ryu::Buffer::new();
            out.extend_from_slice(buf.format_finite(*f).as_bytes());
        }
        Value::String(s) => write_string(out, s),
        Value::Timestamp(t) => write_string(out, &t.to_rfc3339()),
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_value(out, item)?;
            }
            out.push(b']');
        }
        Value::Map(map) => {
            // BTreeMap<String, _> iterates in byte order, which for UTF-8 is
            // code point order.
            out.push(b'{');
            for (i, (k, v)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_string(out, k);
                out.push(b':');
                write_value(out, v)?;
            }
            out.push(b'}');
        }
    }
    Ok(())
}

fn write_string(out: &mut Vec<u8>, s: &str) {
    const HEX: &[u8; 16] = b"0123456789abcdef";
    out.push(b'"');
    for &b in s.as_bytes() {
        match b {
            b'"' => out.extend_from_slice(b"\\\""),
            b'\\' => out.extend_from_slice(b"\\\\"),
            b'\n' => out.extend_from_slice(b"\\n"),
            b'\r' => out.extend_from_slice(b"\\r"),
            b'\t' => out.extend_from_slice(b"\\t"),
            0x08 => out.extend_from_slice(b"\\b"),
            0x0c => out.extend_from_slice(b"\\f"),
            0x00..=0x1f => {
                out.extend_from_slice(b"\\u00");
                out.push(HEX[(b >> 4) as usize]);
                out.push(HEX[(b & 0xf) as usize]);
            }
            _ => out.push(b),
        }
    }
    out.push(b'"');
}

/// Decodes canonical (or any JSON) bytes into a [`Value`].
pub fn decode(bytes: &[u8]) -> Result<Value, DecodeError> {
    let json: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| DecodeError::Syntax(e.to_string()))?;
    from_json(json)
}

fn from_json(json: serde_json::Value) -> Result<Value, DecodeError> {
    Ok(match json {
        serde_json::Value::Null => Value::Null,
        serde_json::Value::Bool(b) => Value::Bool(b),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                Value::Int(i)
            } else if n.is_u64() {
                return Err(DecodeError::Syntax(format!("integer {n} exceeds 64-bit signed range")));
            } else {
                Value::Float(n.as_f64().ok_or_else(|| DecodeError::Syntax(format!("bad number {n}")))?)
            }
        }
        serde_json::Value::String(s) => Value::String(s),
        serde_json::Value::Array(items) => {
            Value::Array(items.into_iter().map(from_json).collect::<Result<_, _>>()?)
        }
        serde_json::Value::Object(map) => Value::Map(
            map.into_iter()
                .map(|(k, v)| Ok((k, from_json(v)?)))
                .collect::<Result<_, DecodeError>>()?,
        ),
    })
}

impl Value {
    pub fn str(s: impl Into<String>) -> Value {
        Value::String(s.into())
    }

    /// Builds a map from `(key, value)` pairs.
    pub fn map<K: Into<String>>(entries: impl IntoIterator<Item = (K, Value)>) -> Value {
        Value::Map(entries.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn hash(h: &ObjectHash) -> Value {
        Value::String(h.to_hex())
    }

    pub fn opt_hash(h: &Option<ObjectHash>) -> Value {
        h.as_ref().map_or(Value::Null, Value::hash)
    }

    pub fn opt_timestamp(t: Option<Timestamp>) -> Value {
        t.map_or(Value::Null, Value::Timestamp)
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Value::Null => "null",
            Value::Bool(_) => "bool",
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::String(_) => "string",
            Value::Timestamp(_) => "timestamp",
            Value::Array(_) => "array",
            Value::Map(_) => "map",
        }
    }

    pub fn as_map(&self) -> Option<&BTreeMap<String, Value>> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }

    /// Canonical bytes; panics on non-finite floats. For values already
    /// known to be encodable (keys, decoded data).
    pub fn canonical_string(&self) -> String {
        String::from_utf8(canonicalize(self).expect("encodable value")).expect("utf-8 output")
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::String(s) => f.write_str(s),
            Value::Timestamp(t) => write!(f, "{t}"),
            Value::Null => f.write_str("null"),
            other => match canonicalize(other) {
                Ok(bytes) => f.write_str(&String::from_utf8_lossy(&bytes)),
                Err(_) => write!(f, "{other:?}"),
            },
        }
    }
}

/// Typed field access over a decoded map, with path-qualified errors.
pub struct Fields<'a> {
    path: String,
    map: &'a BTreeMap<String, Value>,
}

impl<'a> Fields<'a> {
    pub fn new(path: impl Into<String>, value: &'a Value) -> Result<Self, DecodeError> {
        let path = path.into();
        match value {
            Value::Map(map) => Ok(Fields { path, map }),
            other => Err(DecodeError::field(path, format!("expected map, found {}", other.kind()))),
        }
    }

    pub fn path_of(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{}", self.path, key)
        }
    }

    pub fn err(&self, key: &str, message: impl Into<String>) -> DecodeError {
        DecodeError::field(self.path_of(key), message)
    }

    pub fn get(&self, key: &str) -> Result<&'a Value, DecodeError> {
        self.map.get(key).ok_or_else(|| self.err(key, "missing"))
    }

    /// Rejects keys outside `allowed`.
    pub fn only(&self, allowed: &[&str]) -> Result<(), DecodeError> {
        match self.map.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(self.err(k, "unexpected field")),
            None => Ok(()),
        }
    }

    pub fn nested(&self, key: &str) -> Result<Fields<'a>, DecodeError> {
        Fields::new(self.path_of(key), self.get(key)?)
    }

    pub fn str(&self, key: &str) -> Result<&'a str, DecodeError> {
        match self.get(key)? {
            Value::String(s) => Ok(s),
            other => Err(self.err(key, format!("expected string, found {}", other.kind()))),
        }
    }

    pub fn opt_str(&self, key: &str) -> Result<Option<&'a str>, DecodeError> {
        match self.get(key)? {
            Value::Null => Ok(None),
            _ => self.str(key).map(Some),
        }
    }

    pub fn i64(&self, key: &str) -> Result<i64, DecodeError> {
        match self.get(key)? {
            Value::Int(i) => Ok(*i),
            other => Err(self.err(key, format!("expected integer, found {}", other.kind()))),
        }
    }

    pub fn u64(&self, key: &str) -> Result<u64, DecodeError> {
        let i = self.i64(key)?;
        u64::try_from(i).map_err(|_| self.err(key, "expected non-negative integer"))
    }

    pub fn bool(&self, key: &str) -> Result<bool, DecodeError> {
        match self.get(key)? {
            Value::Bool(b) => Ok(*b),
            other => Err(self.err(key, format!("expected bool, found {}", other.kind()))),
        }
    }

    pub fn array(&self, key: &str) -> Result<&'a [Value], DecodeError> {
        match self.get(key)? {
            Value::Array(items) => Ok(items),
            other => Err(self.err(key, format!("expected array, found {}", other.kind()))),
        }
    }

    pub fn hash(&self, key: &str) -> Result<ObjectHash, DecodeError> {
        let s = self.str(key)?;
        ObjectHash::parse(s).map_err(|InvalidHash(s)| self.err(key, format!("bad hash {s:?}")))
    }

    pub fn opt_hash(&self, key: &str) -> Result<Option<ObjectHash>, DecodeError> {
        match self.get(key)? {
            Value::Null => Ok(None),
            _ => self.hash(key).map(Some),
        }
    }

    pub fn timestamp(&self, key: &str) -> Result<Timestamp, DecodeError> {
        timestamp_from(self.get(key)?).map_err(|e| self.err(key, e))
    }

    pub fn opt_timestamp(&self, key: &str) -> Result<Option<Timestamp>, DecodeError> {
        match self.get(key)? {
            Value::Null => Ok(None),
            _ => self.timestamp(key).map(Some),
        }
    }
}

/// Reads a timestamp from either a typed value or its canonical string form.
/// Only the exact canonical rendering is accepted for strings.
pub fn timestamp_from(value: &Value) -> Result<Timestamp, String> {
    match value {
        Value::Timestamp(t) => Ok(*t),
        Value::String(s) => {
            let t = Timestamp::parse(s).map_err(|e: TimestampError| e.to_string())?;
            if t.to_rfc3339() != *s {
                return Err(format!("timestamp {s:?} is not in canonical form"));
            }
            Ok(t)
        }
        other => Err(format!("expected timestamp, found {}", other.kind())),
    }
}
