use std::io::Read;
use std::ops::Deref;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::schema::{validate_schema, ColumnKind, Schema};
use super::DataError;

/// One cell when building a dataset row by row.
#[derive(Clone, Debug, PartialEq)]
pub enum CellValue {
    Num(f64),
    Cat(String),
}

impl From<f64> for CellValue {
    fn from(v: f64) -> Self {
        CellValue::Num(v)
    }
}

impl From<&str> for CellValue {
    fn from(v: &str) -> Self {
        CellValue::Cat(v.to_string())
    }
}

/// Column-major storage; categorical cells hold indexes into the category list.
#[derive(Clone, Debug, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<f64>),
    Categorical(Vec<u32>),
}

impl ColumnData {
    fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical(v) => v.len(),
        }
    }

    fn select(&self, rows: &[usize]) -> ColumnData {
        match self {
            ColumnData::Numeric(v) => ColumnData::Numeric(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::Categorical(v) => ColumnData::Categorical(rows.iter().map(|&r| v[r]).collect()),
        }
    }
}

/// Immutable table whose every value lies in its column's declared domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    schema: Arc<Schema>,
    columns: Vec<ColumnData>,
    n_rows: usize,
    confidential: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub clamped: u64,
    pub rejected: u64,
}

impl Dataset {
    /// Builds a dataset from rows, enforcing the domain invariants strictly
    /// (no clamping; use [`ingest_csv`] for raw files).
    pub fn from_rows(schema: Schema, rows: Vec<Vec<CellValue>>, confidential: bool) -> Result<Self, DataError> {
        validate_schema(&schema).map_err(DataError::SchemaInvalid)?;
        let mut columns: Vec<ColumnData> = schema
            .columns
            .iter()
            .map(|c| match c.kind {
                ColumnKind::Numeric { .. } => ColumnData::Numeric(Vec::with_capacity(rows.len())),
                ColumnKind::Categorical { .. } => ColumnData::Categorical(Vec::with_capacity(rows.len())),
            })
            .collect();
        for (r, row) in rows.iter().enumerate() {
            if row.len() != schema.columns.len() {
                return Err(DataError::Invariant(format!("row {r} has {} cells", row.len())));
            }
            for ((cell, spec), col) in row.iter().zip(&schema.columns).zip(columns.iter_mut()) {
                match (cell, &spec.kind, col) {
                    (CellValue::Num(v), ColumnKind::Numeric { lower, upper }, ColumnData::Numeric(out)) => {
                        if !(*lower..=*upper).contains(v) {
                            return Err(DataError::Invariant(format!(
                                "row {r}, column `{}`: {v} outside [{lower}, {upper}]",
                                spec.name
                            )));
                        }
                        out.push(*v);
                    }
                    (CellValue::Cat(s), ColumnKind::Categorical { categories }, ColumnData::Categorical(out)) => {
                        let idx = categories.iter().position(|c| c == s).ok_or_else(|| {
                            DataError::Invariant(format!("row {r}, column `{}`: unknown category `{s}`", spec.name))
                        })?;
                        out.push(idx as u32);
                    }
                    _ => {
                        return Err(DataError::Invariant(format!("row {r}, column `{}`: kind mismatch", spec.name)));
                    }
                }
            }
        }
        Ok(Dataset { schema: Arc::new(schema), columns, n_rows: rows.len(), confidential })
    }

    /// Builds directly from column storage. Values are checked against the schema.
    pub fn from_columns(schema: Schema, columns: Vec<ColumnData>, confidential: bool) -> Result<Self, DataError> {
        validate_schema(&schema).map_err(DataError::SchemaInvalid)?;
        if columns.len() != schema.columns.len() {
            return Err(DataError::Invariant("column count differs from schema".into()));
        }
        let n_rows = columns.first().map_or(0, ColumnData::len);
        for (spec, col) in schema.columns.iter().zip(&columns) {
            if col.len() != n_rows {
                return Err(DataError::Invariant("ragged columns".into()));
            }
            match (&spec.kind, col) {
                (ColumnKind::Numeric { lower, upper }, ColumnData::Numeric(v)) => {
                    if let Some(bad) = v.iter().find(|x| !(*lower..=*upper).contains(*x)) {
                        return Err(DataError::Invariant(format!("column `{}`: {bad} out of bounds", spec.name)));
                    }
                }
                (ColumnKind::Categorical { categories }, ColumnData::Categorical(v)) => {
                    if v.iter().any(|&i| i as usize >= categories.len()) {
                        return Err(DataError::Invariant(format!("column `{}`: bad category index", spec.name)));
                    }
                }
                _ => return Err(DataError::Invariant(format!("column `{}`: kind mismatch", spec.name))),
            }
        }
        Ok(Dataset { schema: Arc::new(schema), columns, n_rows, confidential })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.n_rows
    }

    pub fn is_empty(&self) -> bool {
        self.n_rows == 0
    }

    pub fn is_confidential(&self) -> bool {
        self.confidential
    }

    pub fn column_data(&self, index: usize) -> &ColumnData {
        &self.columns[index]
    }

    pub fn numeric(&self, index: usize) -> &[f64] {
        match &self.columns[index] {
            ColumnData::Numeric(v) => v,
            ColumnData::Categorical(_) => panic!("column {index} is not numeric"),
        }
    }

    pub fn categorical(&self, index: usize) -> &[u32] {
        match &self.columns[index] {
            ColumnData::Categorical(v) => v,
            ColumnData::Numeric(_) => panic!("column {index} is not categorical"),
        }
    }

    pub(crate) fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            schema: Arc::clone(&self.schema),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            n_rows: rows.len(),
            confidential: self.confidential,
        }
    }

    /// Serializes to CSV in schema column order. Numbers use the shortest
    /// representation that round-trips exactly.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
        w.write_record(self.schema.header()).expect("in-memory write");
        let mut record = Vec::with_capacity(self.columns.len());
        for r in 0..self.n_rows {
            record.clear();
            for (spec, col) in self.schema.columns.iter().zip(&self.columns) {
                match col {
                    ColumnData::Numeric(v) => record.push(format!("{}", v[r])),
                    ColumnData::Categorical(v) => {
                        record.push(spec.categories().expect("categorical")[v[r] as usize].clone())
                    }
                }
            }
            w.write_record(&record).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Reads a CSV body against `schema`. Numeric values outside the declared
/// bounds are clamped; rows carrying an unknown category label are dropped.
pub fn ingest_csv<R: Read>(input: R, schema: &Schema, confidential: bool) -> Result<(Dataset, IngestStats), DataError> {
    validate_schema(schema).map_err(DataError::SchemaInvalid)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
    let mut records = reader.records();
    let expected = schema.header().join(",");
    let header = match records.next() {
        Some(rec) => rec.map_err(|e| csv_error(e, 1))?,
        None => return Err(DataError::HeaderMismatch { line: 1, expected, found: String::new() }),
    };
    let found: Vec<&str> = header.iter().map(str::trim).collect();
    if found != schema.header() {
        return Err(DataError::HeaderMismatch { line: 1, expected, found: found.join(",") });
    }

    let mut columns: Vec<ColumnData> = schema
        .columns
        .iter()
        .map(|c| match c.kind {
            ColumnKind::Numeric { .. } => ColumnData::Numeric(Vec::new()),
            ColumnKind::Categorical { .. } => ColumnData::Categorical(Vec::new()),
        })
        .collect();
    let mut stats = IngestStats::default();
    let mut row_num = Vec::with_capacity(schema.columns.len());
    let mut row_cat = Vec::with_capacity(schema.columns.len());

    'rows: for rec in records {
        let rec = rec.map_err(|e| csv_error(e, 0))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec.get(0).is_some_and(|c| c.trim().is_empty()) {
            continue;
        }
        if rec.len() != schema.columns.len() {
            return Err(DataError::MalformedCsv {
                line,
                message: format!("expected {} fields, found {}", schema.columns.len(), rec.len()),
            });
        }
        row_num.clear();
        row_cat.clear();
        let mut clamped_here = 0;
        for (cell, spec) in rec.iter().zip(&schema.columns) {
            let cell = cell.trim();
            match &spec.kind {
                ColumnKind::Numeric { lower, upper } => {
                    let v: f64 = cell.parse().ok().filter(|v: &f64| !v.is_nan()).ok_or_else(|| DataError::BadNumeric {
                        line,
                        column: spec.name.clone(),
                        cell: cell.to_string(),
                    })?;
                    let c = v.clamp(*lower, *upper);
                    if c != v {
                        clamped_here += 1;
                    }
                    row_num.push(c);
                }
                ColumnKind::Categorical { categories } => match categories.iter().position(|c| c == cell) {
                    Some(i) => row_cat.push(i as u32),
                    None => {
                        stats.rejected += 1;
                        continue 'rows;
                    }
                },
            }
        }
        stats.clamped += clamped_here;
        let (mut ni, mut ci) = (0, 0);
        for col in columns.iter_mut() {
            match col {
                ColumnData::Numeric(v) => {
                    v.push(row_num[ni]);
                    ni += 1;
                }
                ColumnData::Categorical(v) => {
                    v.push(row_cat[ci]);
                    ci += 1;
                }
            }
        }
    }
    let n_rows = columns.first().map_or(0, ColumnData::len);
    Ok((Dataset { schema: Arc::new(schema.clone()), columns, n_rows, confidential }, stats))
}

fn csv_error(e: csv::Error, fallback_line: u64) -> DataError {
    let line = e.position().map_or(fallback_line, |p| p.line());
    DataError::MalformedCsv { line, message: e.to_string() }
}

/// A dataset known to be public (synthetic twin or public file). Translation
/// and preview code accept only this type.
#[derive(Clone, Debug, PartialEq)]
pub struct PublicDataset(Dataset);

impl PublicDataset {
    pub fn new(data: Dataset) -> Result<Self, DataError> {
        if data.is_confidential() {
            return Err(DataError::Invariant("dataset is flagged confidential".into()));
        }
        Ok(PublicDataset(data))
    }

    pub fn into_inner(self) -> Dataset {
        self.0
    }
}

impl Deref for PublicDataset {
    type Target = Dataset;
    fn deref(&self) -> &Dataset {
        &self.0
    }
}

/// A dataset flagged confidential; only the workflow's dry run and execution touch it.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidentialDataset(Dataset);

impl ConfidentialDataset {
    pub fn new(data: Dataset) -> Result<Self, DataError> {
        if !data.is_confidential() {
            return Err(DataError::Invariant("dataset is not flagged confidential".into()));
        }
        Ok(ConfidentialDataset(data))
    }
}

impl Deref for ConfidentialDataset {
    type Target = Dataset;
    fn deref(&self) -> &Dataset {
        &self.0
    }
}
