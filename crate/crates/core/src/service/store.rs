//! File layout under the data directory:
//!
//! ```text
//! datasets/<id>/schema.json        manifest
//! datasets/<id>/confidential.csv   bounded, clamped copy of the ingested file
//! datasets/<id>/synthetic.csv      public twin
//! datasets/<id>/synthetic.json     provenance record
//! ledger/ledger.jsonl, ledger/projects.json
//! workflow/{proposals,reports,releases,staging}/*.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{ingest_csv, ConfidentialDataset, DataError, IngestStats, PublicDataset, Schema};
use crate::ids::DatasetId;
use crate::ledger::write_atomic;
use crate::synthetic::{read_synthetic_csv, ProvenanceRecord, SyntheticRegistration};

use super::ServiceError;

pub const DATASETS: &str = "datasets";

/// A registered dataset: schema, confidential rows and (once registered) the
/// public synthetic twin.
#[derive(Clone, Debug)]
pub struct DatasetEntry {
    pub schema: Schema,
    pub confidential: ConfidentialDataset,
    pub synthetic: Option<SyntheticRegistration>,
}

pub fn dataset_dir(data_dir: &Path, id: &DatasetId) -> PathBuf {
    data_dir.join(DATASETS).join(id.as_str())
}

/// Reads a manifest; `.toml` files as TOML, everything else as JSON.
pub fn read_manifest(path: &Path) -> Result<Schema, ServiceError> {
    let text = fs::read_to_string(path).map_err(|e| ServiceError::Io(format!("{}: {e}", path.display())))?;
    let toml = path.extension().is_some_and(|x| x == "toml");
    Schema::from_manifest(&text, toml).map_err(ServiceError::Validation)
}

/// Validates `csv` against `schema` and stores both as a confidential dataset.
pub fn ingest(data_dir: &Path, schema: &Schema, csv: &[u8]) -> Result<IngestStats, ServiceError> {
    if !schema.dataset_id.is_valid() {
        return Err(ServiceError::Validation(format!("invalid dataset id `{}`", schema.dataset_id)));
    }
    let dir = dataset_dir(data_dir, &schema.dataset_id);
    if dir.join("confidential.csv").exists() {
        return Err(ServiceError::Conflict(format!("dataset `{}` already registered", schema.dataset_id)));
    }
    let (data, stats) = ingest_csv(csv, schema, true).map_err(|e| ServiceError::Validation(e.to_string()))?;
    fs::create_dir_all(&dir)?;
    write_atomic(&dir.join("schema.json"), &serde_json::to_vec_pretty(schema).expect("serializes"))?;
    write_atomic(&dir.join("confidential.csv"), data.to_csv().as_bytes())?;
    Ok(stats)
}

fn load_schema(dir: &Path) -> Result<Schema, ServiceError> {
    read_manifest(&dir.join("schema.json"))
}

/// Registers a curator-supplied synthetic file after validation.
pub fn register_synthetic_file(
    data_dir: &Path,
    id: &DatasetId,
    csv: &str,
    note: Option<String>,
) -> Result<ProvenanceRecord, ServiceError> {
    let dir = dataset_dir(data_dir, id);
    let schema = load_schema(&dir).map_err(|_| ServiceError::NotFound(format!("dataset `{id}`")))?;
    let data = read_synthetic_csv(&schema, csv).map_err(|v| {
        ServiceError::Validation(v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; "))
    })?;
    let reg = SyntheticRegistration::curator_supplied(&schema, data, note).map_err(|v| {
        ServiceError::Validation(v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; "))
    })?;
    save_synthetic(&dir, &reg)?;
    Ok(reg.record().clone())
}

pub fn register_placeholder(data_dir: &Path, id: &DatasetId, n: usize, seed: u64) -> Result<ProvenanceRecord, ServiceError> {
    let dir = dataset_dir(data_dir, id);
    let schema = load_schema(&dir).map_err(|_| ServiceError::NotFound(format!("dataset `{id}`")))?;
    let reg = SyntheticRegistration::placeholder(&schema, n, seed).map_err(|e| ServiceError::Validation(e.to_string()))?;
    save_synthetic(&dir, &reg)?;
    Ok(reg.record().clone())
}

fn save_synthetic(dir: &Path, reg: &SyntheticRegistration) -> Result<(), ServiceError> {
    write_atomic(&dir.join("synthetic.csv"), reg.data().to_csv().as_bytes())?;
    write_atomic(&dir.join("synthetic.json"), &serde_json::to_vec_pretty(reg.record()).expect("serializes"))?;
    Ok(())
}

/// Loads every dataset under `data_dir`.
pub fn load_datasets(data_dir: &Path) -> Result<BTreeMap<DatasetId, DatasetEntry>, ServiceError> {
    let root = data_dir.join(DATASETS);
    let mut out = BTreeMap::new();
    if !root.exists() {
        return Ok(out);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    for dir in dirs {
        if !dir.join("confidential.csv").exists() {
            continue;
        }
        let schema = load_schema(&dir)?;
        let read = |name: &str| -> Result<Vec<u8>, ServiceError> {
            fs::read(dir.join(name)).map_err(|e| ServiceError::Io(format!("{}: {e}", dir.join(name).display())))
        };
        let (data, _) = ingest_csv(read("confidential.csv")?.as_slice(), &schema, true).map_err(stored)?;
        let confidential = ConfidentialDataset::new(data).map_err(stored)?;
        let synthetic = if dir.join("synthetic.csv").exists() {
            let record: ProvenanceRecord = serde_json::from_slice(&read("synthetic.json")?)
                .map_err(|e| ServiceError::Io(format!("synthetic.json: {e}")))?;
            let (data, _) = ingest_csv(read("synthetic.csv")?.as_slice(), &schema, false).map_err(stored)?;
            Some(SyntheticRegistration::from_parts(record, PublicDataset::new(data).map_err(stored)?))
        } else {
            None
        };
        out.insert(schema.dataset_id.clone(), DatasetEntry { schema, confidential, synthetic });
    }
    Ok(out)
}

fn stored(e: DataError) -> ServiceError {
    ServiceError::Io(format!("stored dataset unreadable: {e}"))
}
