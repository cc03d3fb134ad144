use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    EntityId,
    Timestamp,
    Numerical,
    Categorical,
    StaticNumerical,
    StaticCategorical,
}

impl ColumnKind {
    fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_owned()))
            .map_err(|_| Error::InvalidSchema(format!("unknown column kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    /// The spend amount used by the RFM baseline.
    Monetary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<ColumnRole>,
}

impl ColumnSpec {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        Self {
            name: name.into(),
            kind,
            role: None,
        }
    }

    pub fn monetary(mut self) -> Self {
        self.role = Some(ColumnRole::Monetary);
        self
    }
}

/// Declared column layout of an activity table.
///
/// The JSON form maps column name to kind, either as a bare string or as an
/// object carrying an optional role tag:
///
/// ```json
/// { "customer": "entity_id", "ts": "timestamp",
///   "amount": { "kind": "numerical", "role": "monetary" } }
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        let schema = Self { columns };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::InvalidSchema(format!("duplicate column `{}`", c.name)));
            }
        }
        for kind in [ColumnKind::EntityId, ColumnKind::Timestamp] {
            let n = self.columns.iter().filter(|c| c.kind == kind).count();
            if n != 1 {
                return Err(Error::InvalidSchema(format!(
                    "expected exactly one {kind:?} column, found {n}"
                )));
            }
        }
        let monetary: Vec<_> = self
            .columns
            .iter()
            .filter(|c| c.role == Some(ColumnRole::Monetary))
            .collect();
        if monetary.len() > 1 {
            return Err(Error::InvalidSchema("more than one monetary column".into()));
        }
        if let Some(c) = monetary.first() {
            if c.kind != ColumnKind::Numerical {
                return Err(Error::InvalidSchema(format!(
                    "monetary column `{}` must be numerical",
                    c.name
                )));
            }
        }
        Ok(())
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn position(&self, kind: ColumnKind) -> Option<usize> {
        self.columns.iter().position(|c| c.kind == kind)
    }

    pub fn positions(&self, kind: ColumnKind) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn entity_index(&self) -> usize {
        self.position(ColumnKind::EntityId).expect("validated")
    }

    pub fn timestamp_index(&self) -> usize {
        self.position(ColumnKind::Timestamp).expect("validated")
    }

    pub fn monetary_index(&self) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| c.role == Some(ColumnRole::Monetary))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let Value::Object(map) = value else {
            return Err(Error::InvalidSchema("schema must be a JSON object".into()));
        };
        let mut columns = Vec::with_capacity(map.len());
        for (name, v) in map {
            let spec = match v {
                Value::String(kind) => ColumnSpec::new(name, ColumnKind::parse(&kind)?),
                Value::Object(obj) => {
                    let kind = obj
                        .get("kind")
                        .and_then(Value::as_str)
                        .ok_or_else(|| Error::InvalidSchema(format!("column `{name}` has no kind")))?;
                    let role = match obj.get("role").and_then(Value::as_str) {
                        None => None,
                        Some("monetary") => Some(ColumnRole::Monetary),
                        Some(other) => {
                            return Err(Error::InvalidSchema(format!("unknown role `{other}`")))
                        }
                    };
                    ColumnSpec {
                        name,
                        kind: ColumnKind::parse(kind)?,
                        role,
                    }
                }
                _ => {
                    return Err(Error::InvalidSchema(format!(
                        "column `{name}` must map to a kind string or object"
                    )))
                }
            };
            columns.push(spec);
        }
        Self::new(columns)
    }

    pub fn to_json(&self) -> String {
        let mut map = Map::new();
        for c in &self.columns {
            let kind = serde_json::to_value(c.kind).expect("enum serializes");
            let v = match c.role {
                None => kind,
                Some(role) => serde_json::json!({ "kind": kind, "role": role }),
            };
            map.insert(c.name.clone(), v);
        }
        serde_json::to_string_pretty(&Value::Object(map)).expect("json")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
