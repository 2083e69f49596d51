use std::collections::HashSet;
use std::fmt;

use crate::canonical::{timestamp_from, DecodeError, Fields, Value};

/// Column names every record carries outside its payload.
pub const RESERVED_COLUMNS: [&str; 4] = ["offset", "system_time", "event_time", "observed"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ColumnType {
    String,
    Int64,
    Float64,
    Bool,
    Timestamp,
}

impl ColumnType {
    pub fn name(self) -> &'static str {
        match self {
            ColumnType::String => "string",
            ColumnType::Int64 => "int64",
            ColumnType::Float64 => "float64",
            ColumnType::Bool => "bool",
            ColumnType::Timestamp => "timestamp",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "string" => ColumnType::String,
            "int64" => ColumnType::Int64,
            "float64" => ColumnType::Float64,
            "bool" => ColumnType::Bool,
            "timestamp" => ColumnType::Timestamp,
            _ => return None,
        })
    }

    /// Whether `value` (non-null) has this type.
    pub fn admits(self, value: &Value) -> bool {
        matches!(
            (self, value),
            (ColumnType::String, Value::String(_))
                | (ColumnType::Int64, Value::Int(_))
                | (ColumnType::Float64, Value::Float(_))
                | (ColumnType::Bool, Value::Bool(_))
                | (ColumnType::Timestamp, Value::Timestamp(_))
        )
    }

    /// Converts a decoded value back to this type.
    pub fn coerce_decoded(self, value: &Value) -> Result<Value, String> {
        match (self, value) {
            (_, Value::Null) => Ok(Value::Null),
            (ColumnType::Timestamp, v) => timestamp_from(v).map(Value::Timestamp),
            (ty, v) if ty.admits(v) => Ok(v.clone()),
            (ty, v) => Err(format!("expected {}, found {}", ty.name(), v.kind())),
        }
    }
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Column {
    pub name: String,
    pub ty: ColumnType,
    pub nullable: bool,
}

impl Column {
    pub fn new(name: impl Into<String>, ty: ColumnType, nullable: bool) -> Self {
        Column { name: name.into(), ty, nullable }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct SchemaDef {
    pub columns: Vec<Column>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("duplicate column {0:?}")]
    DuplicateColumn(String),
    #[error("column name {0:?} is reserved")]
    ReservedColumn(String),
    #[error("column name must not be empty")]
    EmptyName,
}

impl SchemaDef {
    pub fn new(columns: Vec<Column>) -> Result<Self, SchemaError> {
        let schema = SchemaDef { columns };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if c.name.is_empty() {
                return Err(SchemaError::EmptyName);
            }
            if RESERVED_COLUMNS.contains(&c.name.as_str()) {
                return Err(SchemaError::ReservedColumn(c.name.clone()));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(SchemaError::DuplicateColumn(c.name.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// Checks one payload against the schema; returns a description of the
    /// first violation.
    pub fn check_payload(&self, payload: &[Value]) -> Result<(), String> {
        if payload.len() != self.columns.len() {
            return Err(format!("expected {} values, found {}", self.columns.len(), payload.len()));
        }
        for (col, v) in self.columns.iter().zip(payload) {
            if v.is_null() {
                if !col.nullable {
                    return Err(format!("column {:?} is not nullable", col.name));
                }
            } else if !col.ty.admits(v) {
                return Err(format!("column {:?}: expected {}, found {}", col.name, col.ty, v.kind()));
            }
        }
        Ok(())
    }

    /// `new` extends `self` only by appending nullable columns.
    pub fn is_nullable_extension_of(&self, old: &SchemaDef) -> bool {
        self.columns.len() >= old.columns.len()
            && self.columns[..old.columns.len()] == old.columns[..]
            && self.columns[old.columns.len()..].iter().all(|c| c.nullable)
    }

    pub fn to_value(&self) -> Value {
        Value::Array(
            self.columns
                .iter()
                .map(|c| {
                    Value::map([
                        ("name", Value::str(&c.name)),
                        ("type", Value::str(c.ty.name())),
                        ("nullable", Value::Bool(c.nullable)),
                    ])
                })
                .collect(),
        )
    }

    pub fn from_value(path: &str, value: &Value) -> Result<Self, DecodeError> {
        let Value::Array(items) = value else {
            return Err(DecodeError::field(path, "expected array of columns"));
        };
        let mut columns = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let f = Fields::new(format!("{path}[{i}]"), item)?;
            f.only(&["name", "type", "nullable"])?;
            let ty = f.str("type")?;
            columns.push(Column {
                name: f.str("name")?.to_string(),
                ty: ColumnType::parse(ty).ok_or_else(|| f.err("type", format!("unknown type {ty:?}")))?,
                nullable: f.bool("nullable")?,
            });
        }
        SchemaDef::new(columns).map_err(|e| DecodeError::field(path, e.to_string()))
    }
}

impl fmt::Display for SchemaDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, c) in self.columns.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{} {}", c.name, c.ty)?;
            if !c.nullable {
                f.write_str(" not null")?;
            }
        }
        f.write_str(")")
    }
}
