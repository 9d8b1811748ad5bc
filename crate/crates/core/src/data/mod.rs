//! Typed tabular data: schemas with declared bounds, bounded CSV ingestion,
//! conjunctive filters and the structured query objects the API accepts.

mod dataset;
mod filter;
mod query;
mod schema;

pub use dataset::{ingest_csv, CellValue, ColumnData, ConfidentialDataset, Dataset, IngestStats, PublicDataset};
pub use filter::{apply_filter, Filter, Predicate};
pub use query::{Query, QueryKind, StatisticKind};
pub use schema::{scale_unit, unscale_unit, validate_schema, ColumnKind, ColumnSpec, Schema, Violation};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("schema invalid: {}", join_violations(.0))]
    SchemaInvalid(Vec<Violation>),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{column}` must be {expected}")]
    KindMismatch { column: String, expected: &'static str },
    #[error("invalid operand for column `{column}`: {detail}")]
    InvalidOperand { column: String, detail: String },
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("value {value} outside bounds [{lower}, {upper}]")]
    OutOfBounds { value: f64, lower: f64, upper: f64 },
    #[error("header mismatch line {line}: expected `{expected}`, found `{found}`")]
    HeaderMismatch { line: u64, expected: String, found: String },
    #[error("malformed CSV line {line}: {message}")]
    MalformedCsv { line: u64, message: String },
    #[error("non-parsable numeric cell line {line}, column `{column}`: `{cell}`")]
    BadNumeric { line: u64, column: String, cell: String },
    #[error("dataset invariant violated: {0}")]
    Invariant(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
