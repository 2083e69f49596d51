//! YAML dataset manifests.
//!
//! ```yaml
//! name: orders
//! kind: root
//! source:
//!   path: orders.csv
//!   format: csv
//!   event_time_column: order_time
//!   schema:
//!     - { name: order_time, type: timestamp }
//!     - { name: order_id, type: int64 }
//!   merge: { kind: ledger, primary_key: [order_id] }
//!   allowed_lateness: 2d
//! ```
//!
//! ```yaml
//! name: late_shipments
//! kind: derivative
//! inputs: [orders, shipments]
//! query: SELECT ...
//! engine: odf-desk-sql
//! ```

use std::path::{Path, PathBuf};

use odf_core::chain::{MergeStrategy, PollingSource, SourceFormat};
use odf_core::engine::{EngineVersion, ENGINE_NAME, ENGINE_SEMVER};
use odf_core::{Column, ColumnType, SchemaDef};
use serde_yaml::{Mapping, Value};

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest is not valid YAML: {0}")]
    Yaml(#[from] serde_yaml::Error),
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("inputs: unknown dataset name {0:?}")]
    UnknownInputName(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Manifest {
    Root { name: String, source: PollingSource, path: PathBuf },
    Derivative { name: String, inputs: Vec<String>, query: String, engine: EngineVersion },
}

impl Manifest {
    pub fn name(&self) -> &str {
        match self {
            Manifest::Root { name, .. } | Manifest::Derivative { name, .. } => name,
        }
    }
}

/// Loads a manifest; a relative `source.path` is taken relative to the
/// manifest's directory.
pub fn load(path: &Path) -> Result<Manifest, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io { path: path.to_path_buf(), source })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse(&text, base)
}

pub fn parse(text: &str, base: &Path) -> Result<Manifest, ManifestError> {
    let doc: Value = serde_yaml::from_str(text)?;
    let top = Obj::new("", &doc)?;
    let name = top.str("name")?.to_string();
    match top.str("kind")? {
        "root" => {
            top.only(&["name", "kind", "source"])?;
            let (source, path) = source(&top.obj("source")?, base)?;
            Ok(Manifest::Root { name, source, path })
        }
        "derivative" => {
            top.only(&["name", "kind", "inputs", "query", "engine"])?;
            let inputs = top.str_list("inputs")?;
            if inputs.is_empty() {
                return Err(top.err("inputs", "at least one input is required"));
            }
            let query = top.str("query")?.to_string();
            let engine = match top.opt("engine") {
                None => EngineVersion::current(),
                Some(_) => engine(&top)?,
            };
            Ok(Manifest::Derivative { name, inputs, query, engine })
        }
        other => Err(top.err("kind", format!("expected root or derivative, found {other:?}"))),
    }
}

fn engine(top: &Obj<'_>) -> Result<EngineVersion, ManifestError> {
    let text = top.str("engine")?;
    let (name, version) = match text.split_once('@') {
        Some((n, v)) => (n, Some(v)),
        None => (text, None),
    };
    if name != ENGINE_NAME {
        return Err(top.err("engine", format!("unknown engine {name:?} (available: {ENGINE_NAME})")));
    }
    if version.is_some_and(|v| v != ENGINE_SEMVER) {
        return Err(top.err("engine", format!("version unavailable (this build has {ENGINE_SEMVER})")));
    }
    Ok(EngineVersion::current())
}

fn source(src: &Obj<'_>, base: &Path) -> Result<(PollingSource, PathBuf), ManifestError> {
    src.only(&["path", "format", "event_time_column", "schema", "merge", "allowed_lateness"])?;
    let path = base.join(src.str("path")?);
    let format = SourceFormat::parse(src.str("format")?)
        .ok_or_else(|| src.err("format", "expected csv or ndjson"))?;
    let event_time_column = match src.opt("event_time_column") {
        None | Some(Value::Null) => None,
        Some(_) => Some(src.str("event_time_column")?.to_string()),
    };

    let mut columns = Vec::new();
    for (i, item) in src.list("schema")?.iter().enumerate() {
        let col = Obj::new(&format!("{}[{i}]", src.path_of("schema")), item)?;
        col.only(&["name", "type", "nullable"])?;
        let ty = col.str("type")?;
        let ty = ColumnType::parse(ty).ok_or_else(|| col.err("type", format!("unknown column type {ty:?}")))?;
        let nullable = match col.opt("nullable") {
            None => false,
            Some(Value::Bool(b)) => *b,
            Some(_) => return Err(col.err("nullable", "expected true or false")),
        };
        columns.push(Column::new(col.str("name")?, ty, nullable));
    }
    let schema = SchemaDef::new(columns).map_err(|e| src.err("schema", e.to_string()))?;

    let merge = src.obj("merge")?;
    merge.only(&["kind", "primary_key"])?;
    let primary_key = merge.str_list("primary_key")?;
    let merge = match merge.str("kind")? {
        "ledger" => MergeStrategy::Ledger { primary_key },
        "snapshot" => MergeStrategy::Snapshot { primary_key },
        other => return Err(merge.err("kind", format!("expected ledger or snapshot, found {other:?}"))),
    };

    let allowed_lateness_ms = match src.opt("allowed_lateness") {
        None => 0,
        Some(Value::Number(n)) => n.as_u64().ok_or_else(|| src.err("allowed_lateness", "expected a non-negative number of milliseconds"))?,
        Some(Value::String(s)) => parse_duration(s).ok_or_else(|| {
            src.err("allowed_lateness", format!("cannot parse duration {s:?} (use e.g. 500ms, 4s, 15m, 12h, 2d)"))
        })?,
        Some(_) => return Err(src.err("allowed_lateness", "expected a duration")),
    };

    let source = PollingSource { format, schema, event_time_column, merge, allowed_lateness_ms };
    source.check().map_err(|message| ManifestError::Invalid { path: src.path.clone(), message })?;
    Ok((source, path))
}

/// `500ms`, `4s`, `15m`, `12h`, `2d`.
pub fn parse_duration(text: &str) -> Option<u64> {
    let text = text.trim();
    let split = text.find(|c: char| !c.is_ascii_digit())?;
    let (n, unit) = text.split_at(split);
    let n: u64 = n.parse().ok()?;
    let scale = match unit.trim() {
        "ms" => 1,
        "s" => 1_000,
        "m" => 60_000,
        "h" => 3_600_000,
        "d" => 86_400_000,
        _ => return None,
    };
    n.checked_mul(scale)
}

/// A mapping plus the field path it was found at.
struct Obj<'a> {
    path: String,
    map: &'a Mapping,
}

impl<'a> Obj<'a> {
    fn new(path: &str, value: &'a Value) -> Result<Self, ManifestError> {
        match value {
            Value::Mapping(map) => Ok(Obj { path: path.to_string(), map }),
            _ => Err(ManifestError::Invalid {
                path: if path.is_empty() { "<document>".into() } else { path.into() },
                message: "expected a mapping".into(),
            }),
        }
    }

    fn path_of(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn err(&self, key: &str, message: impl Into<String>) -> ManifestError {
        ManifestError::Invalid { path: self.path_of(key), message: message.into() }
    }

    fn only(&self, allowed: &[&str]) -> Result<(), ManifestError> {
        for k in self.map.keys() {
            match k.as_str() {
                Some(k) if allowed.contains(&k) => {}
                Some(k) => return Err(self.err(k, "unknown field")),
                None => return Err(self.err("<key>", "field names must be strings")),
            }
        }
        Ok(())
    }

    fn opt(&self, key: &str) -> Option<&'a Value> {
        self.map.get(key)
    }

    fn get(&self, key: &str) -> Result<&'a Value, ManifestError> {
        self.opt(key).ok_or_else(|| self.err(key, "missing field"))
    }

    fn str(&self, key: &str) -> Result<&'a str, ManifestError> {
        self.get(key)?.as_str().ok_or_else(|| self.err(key, "expected a string"))
    }

    fn obj(&self, key: &str) -> Result<Obj<'a>, ManifestError> {
        Obj::new(&self.path_of(key), self.get(key)?)
    }

    fn list(&self, key: &str) -> Result<&'a [Value], ManifestError> {
        self.get(key)?.as_sequence().map(Vec::as_slice).ok_or_else(|| self.err(key, "expected a list"))
    }

    fn str_list(&self, key: &str) -> Result<Vec<String>, ManifestError> {
        self.list(key)?
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.as_str().map(str::to_string).ok_or_else(|| ManifestError::Invalid {
                    path: format!("{}[{i}]", self.path_of(key)),
                    message: "expected a string".into(),
                })
            })
            .collect()
    }
}
