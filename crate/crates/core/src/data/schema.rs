use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::ids::{is_valid_identifier, DatasetId};

/// Declared domain of a column. Bounds and category lists are public curator
/// metadata; they drive clamping at ingestion and every sensitivity bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric { lower: f64, upper: f64 },
    Categorical { categories: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

impl ColumnSpec {
    pub fn numeric(name: impl Into<String>, lower: f64, upper: f64) -> Self {
        ColumnSpec { name: name.into(), kind: ColumnKind::Numeric { lower, upper } }
    }

    pub fn categorical<S: Into<String>>(name: impl Into<String>, categories: impl IntoIterator<Item = S>) -> Self {
        ColumnSpec {
            name: name.into(),
            kind: ColumnKind::Categorical { categories: categories.into_iter().map(Into::into).collect() },
        }
    }

    pub fn bounds(&self) -> Option<(f64, f64)> {
        match self.kind {
            ColumnKind::Numeric { lower, upper } => Some((lower, upper)),
            ColumnKind::Categorical { .. } => None,
        }
    }

    pub fn categories(&self) -> Option<&[String]> {
        match &self.kind {
            ColumnKind::Categorical { categories } => Some(categories),
            ColumnKind::Numeric { .. } => None,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.kind, ColumnKind::Numeric { .. })
    }
}

/// Column layout of a dataset. Also the manifest format (JSON or TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub dataset_id: DatasetId,
    pub columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn new(dataset_id: impl Into<DatasetId>, columns: Vec<ColumnSpec>) -> Result<Self, DataError> {
        let schema = Schema { dataset_id: dataset_id.into(), columns };
        validate_schema(&schema).map_err(DataError::SchemaInvalid)?;
        Ok(schema)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, name: &str) -> Result<(usize, &ColumnSpec), DataError> {
        self.column_index(name)
            .map(|i| (i, &self.columns[i]))
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))
    }

    pub fn numeric_column(&self, name: &str) -> Result<(usize, f64, f64), DataError> {
        let (i, spec) = self.column(name)?;
        spec.bounds()
            .map(|(l, u)| (i, l, u))
            .ok_or(DataError::KindMismatch { column: name.to_string(), expected: "numeric" })
    }

    pub fn categorical_column(&self, name: &str) -> Result<(usize, &[String]), DataError> {
        let (i, spec) = self.column(name)?;
        spec.categories()
            .map(|c| (i, c))
            .ok_or(DataError::KindMismatch { column: name.to_string(), expected: "categorical" })
    }

    pub fn header(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    /// Parses a manifest; `.toml` paths are read as TOML, anything else as JSON.
    pub fn from_manifest(text: &str, toml_format: bool) -> Result<Self, String> {
        let schema: Schema = if toml_format {
            toml::from_str(text).map_err(|e| e.to_string())?
        } else {
            serde_json::from_str(text).map_err(|e| e.to_string())?
        };
        validate_schema(&schema).map_err(|v| DataError::SchemaInvalid(v).to_string())?;
        Ok(schema)
    }
}

/// A single broken schema rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub column: Option<String>,
    pub rule: String,
}

impl Violation {
    pub(crate) fn new(column: Option<&str>, rule: impl Into<String>) -> Self {
        Violation { column: column.map(str::to_string), rule: rule.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.column {
            Some(c) => write!(f, "column `{}`: {}", c, self.rule),
            None => f.write_str(&self.rule),
        }
    }
}

pub fn validate_schema(schema: &Schema) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    if !schema.dataset_id.is_valid() {
        out.push(Violation::new(None, "invalid dataset id"));
    }
    if schema.columns.is_empty() {
        out.push(Violation::new(None, "schema has no columns"));
    }
    let mut seen = HashSet::new();
    for col in &schema.columns {
        let name = col.name.as_str();
        if !is_valid_identifier(name) {
            out.push(Violation::new(Some(name), "invalid column name"));
        }
        if !seen.insert(name) {
            out.push(Violation::new(Some(name), "duplicate name"));
        }
        match &col.kind {
            ColumnKind::Numeric { lower, upper } => {
                if !lower.is_finite() || !upper.is_finite() {
                    out.push(Violation::new(Some(name), "bounds not finite"));
                } else if lower == upper {
                    out.push(Violation::new(Some(name), "bounds degenerate"));
                } else if lower > upper {
                    out.push(Violation::new(Some(name), "bounds inverted"));
                }
            }
            ColumnKind::Categorical { categories } => {
                if categories.is_empty() {
                    out.push(Violation::new(Some(name), "no categories"));
                }
                let mut labels = HashSet::new();
                for c in categories {
                    if !labels.insert(c.as_str()) {
                        out.push(Violation::new(Some(name), format!("duplicate category `{c}`")));
                    }
                }
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Maps `value` in `[lower, upper]` linearly onto `[0, 1]`.
pub fn scale_unit(value: f64, lower: f64, upper: f64) -> Result<f64, DataError> {
    if !(lower < upper) || !(lower..=upper).contains(&value) {
        return Err(DataError::OutOfBounds { value, lower, upper });
    }
    Ok((value - lower) / (upper - lower))
}

/// Inverse of [`scale_unit`].
pub fn unscale_unit(unit: f64, lower: f64, upper: f64) -> f64 {
    lower + unit * (upper - lower)
}
