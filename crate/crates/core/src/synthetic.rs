//! The public synthetic twin of a confidential dataset.
//!
//! Curators either supply a file (prior-year data, a public extract, their own
//! synthesizer's output) that matches the confidential schema exactly, or
//! accept a placeholder drawn uniformly from the declared domain. Neither path
//! reads confidential rows.

use serde::{Deserialize, Serialize};

use crate::data::{
    ingest_csv, CellValue, ColumnKind, DataError, Dataset, PublicDataset, Query, Schema, Violation,
};
use crate::ids::DatasetId;
use crate::mechanisms::{MechanismConfig, MechanismError, MechanismResult, Prepared, PrivacyCost};
use crate::rng::RandomSource;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    CuratorSupplied,
    PlaceholderGenerated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub dataset_id: DatasetId,
    pub provenance: Provenance,
    pub seed: Option<u64>,
    pub rows: usize,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRegistration {
    record: ProvenanceRecord,
    data: PublicDataset,
}

impl SyntheticRegistration {
    /// Registers a curator file after checking it against the confidential schema.
    pub fn curator_supplied(
        confidential_schema: &Schema,
        candidate: PublicDataset,
        note: Option<String>,
    ) -> Result<Self, Vec<Violation>> {
        validate_synthetic(confidential_schema, &candidate)?;
        Ok(SyntheticRegistration {
            record: ProvenanceRecord {
                dataset_id: confidential_schema.dataset_id.clone(),
                provenance: Provenance::CuratorSupplied,
                seed: None,
                rows: candidate.len(),
                note,
            },
            data: candidate,
        })
    }

    pub fn placeholder(schema: &Schema, n: usize, seed: u64) -> Result<Self, DataError> {
        let data = generate_placeholder(schema, n, seed)?;
        Ok(SyntheticRegistration {
            record: ProvenanceRecord {
                dataset_id: schema.dataset_id.clone(),
                provenance: Provenance::PlaceholderGenerated,
                seed: Some(seed),
                rows: n,
                note: Some("placeholder drawn uniformly from the declared domain; not for inference".into()),
            },
            data,
        })
    }

    /// Rebuilds a registration from stored parts (no re-validation of provenance).
    pub fn from_parts(record: ProvenanceRecord, data: PublicDataset) -> Self {
        SyntheticRegistration { record, data }
    }

    pub fn record(&self) -> &ProvenanceRecord {
        &self.record
    }

    pub fn data(&self) -> &PublicDataset {
        &self.data
    }
}

/// Checks that `candidate` has exactly the confidential schema's columns and
/// that every value lies in the confidential domain.
pub fn validate_synthetic(confidential_schema: &Schema, candidate: &PublicDataset) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let cand = candidate.schema();
    for spec in &confidential_schema.columns {
        match cand.column(&spec.name) {
            Err(_) => out.push(Violation::new(Some(&spec.name), "column absent")),
            Ok((idx, c)) => {
                if idx != confidential_schema.column_index(&spec.name).expect("own column") {
                    out.push(Violation::new(Some(&spec.name), "column out of order"));
                }
                if c.kind != spec.kind {
                    out.push(Violation::new(Some(&spec.name), "column kind or domain differs"));
                }
                check_values(spec.name.as_str(), &spec.kind, candidate, idx, c.kind == spec.kind, &mut out);
            }
        }
    }
    for c in &cand.columns {
        if confidential_schema.column_index(&c.name).is_none() {
            out.push(Violation::new(Some(&c.name), "unexpected column"));
        }
    }
    if out.is_empty() { Ok(()) } else { Err(out) }
}

fn check_values(name: &str, kind: &ColumnKind, data: &Dataset, idx: usize, same_kind: bool, out: &mut Vec<Violation>) {
    let cand_kind = &data.schema().columns[idx].kind;
    match (kind, cand_kind) {
        (ColumnKind::Numeric { lower, upper }, ColumnKind::Numeric { .. }) => {
            for (row, v) in data.numeric(idx).iter().enumerate() {
                if !(lower <= v && v <= upper) {
                    out.push(Violation::new(Some(name), format!("row {} value {v} out of bounds [{lower}, {upper}]", row + 1)));
                }
            }
        }
        (ColumnKind::Categorical { categories }, ColumnKind::Categorical { categories: theirs }) if !same_kind => {
            for (row, &c) in data.categorical(idx).iter().enumerate() {
                let label = &theirs[c as usize];
                if !categories.contains(label) {
                    out.push(Violation::new(Some(name), format!("row {} unknown category `{label}`", row + 1)));
                }
            }
        }
        _ => {}
    }
}

/// Reads a curator CSV against the confidential schema without clamping:
/// anything outside the domain is reported, not repaired.
pub fn read_synthetic_csv(confidential_schema: &Schema, text: &str) -> Result<PublicDataset, Vec<Violation>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let header: Vec<String> = match reader.headers() {
        Ok(h) => h.iter().map(|s| s.trim().to_string()).collect(),
        Err(e) => return Err(vec![Violation::new(None, format!("unreadable header: {e}"))]),
    };
    let mut out = Vec::new();
    for spec in &confidential_schema.columns {
        if !header.contains(&spec.name) {
            out.push(Violation::new(Some(&spec.name), "column absent"));
        }
    }
    for h in &header {
        if confidential_schema.column_index(h).is_none() {
            out.push(Violation::new(Some(h), "unexpected column"));
        }
    }
    if !out.is_empty() {
        return Err(out);
    }
    if header != confidential_schema.header() {
        return Err(vec![Violation::new(None, "columns out of order")]);
    }
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                out.push(Violation::new(None, format!("row {row} malformed: {e}")));
                continue;
            }
        };
        if record.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        for (spec, cell) in confidential_schema.columns.iter().zip(record.iter()) {
            let cell = cell.trim();
            match &spec.kind {
                ColumnKind::Numeric { lower, upper } => match cell.parse::<f64>() {
                    Ok(v) if v >= *lower && v <= *upper => {}
                    Ok(v) => out.push(Violation::new(
                        Some(&spec.name),
                        format!("row {row} value {v} out of bounds [{lower}, {upper}]"),
                    )),
                    Err(_) => out.push(Violation::new(Some(&spec.name), format!("row {row} non-numeric `{cell}`"))),
                },
                ColumnKind::Categorical { categories } => {
                    if !categories.iter().any(|c| c == cell) {
                        out.push(Violation::new(Some(&spec.name), format!("row {row} unknown category `{cell}`")));
                    }
                }
            }
        }
        if record.len() != confidential_schema.columns.len() {
            out.push(Violation::new(None, format!("row {row} has {} cells", record.len())));
        }
    }
    if !out.is_empty() {
        return Err(out);
    }
    let (data, _) = ingest_csv(text.as_bytes(), confidential_schema, false).map_err(|e| vec![Violation::new(None, e.to_string())])?;
    PublicDataset::new(data).map_err(|e| vec![Violation::new(None, e.to_string())])
}

/// `n` rows drawn independently and uniformly from each column's domain.
pub fn generate_placeholder(schema: &Schema, n: usize, seed: u64) -> Result<PublicDataset, DataError> {
    if n == 0 {
        return Err(DataError::InvalidQuery("placeholder needs at least one row".into()));
    }
    let mut rng = RandomSource::seeded(seed);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let row = schema
            .columns
            .iter()
            .map(|c| match &c.kind {
                ColumnKind::Numeric { lower, upper } => {
                    CellValue::Num((lower + rng.unit() * (upper - lower)).min(*upper))
                }
                ColumnKind::Categorical { categories } => CellValue::Cat(categories[rng.below(categories.len())].clone()),
            })
            .collect();
        rows.push(row);
    }
    PublicDataset::new(Dataset::from_rows(schema.clone(), rows, false)?)
}

/// Exact answer on synthetic data, plus one seeded noisy run when ε is given.
/// Never touches the ledger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreviewResult {
    pub exact: MechanismResult,
    pub noisy: Option<MechanismResult>,
}

pub fn run_preview(
    query: &Query,
    synthetic: &PublicDataset,
    epsilon: Option<PrivacyCost>,
    seed: u64,
    config: &MechanismConfig,
) -> Result<PreviewResult, MechanismError> {
    let prepared = Prepared::build(query, synthetic, config)?;
    let unit = PrivacyCost::new(1.0)?;
    let exact = prepared.privatize(&query.query_id, unit, &mut RandomSource::exact(), config);
    let noisy = epsilon.map(|eps| prepared.privatize(&query.query_id, eps, &mut RandomSource::seeded(seed), config));
    Ok(PreviewResult { exact, noisy })
}
