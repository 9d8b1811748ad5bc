//! Per-project privacy accounting.
//!
//! The ledger is an append-only, digest-chained log of debit records. A debit
//! goes through two phases: `reserved` before any mechanism runs, then
//! `committed` (or `void` on failure) before anything is released. Totals use
//! basic sequential composition over committed entries only.
//!
//! On disk the log is one JSON object per line (`ledger.jsonl`); projects live
//! in `projects.json` next to it.

mod chain;

pub use chain::{exact_sum, link_digest, GENESIS_DIGEST};

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{DatasetId, ProjectId};
use crate::mechanisms::PrivacyCost;

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const PROJECTS_FILE: &str = "projects.json";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error("unknown project `{0}`")]
    NotFound(ProjectId),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("query `{0}` already committed")]
    DoubleCommit(String),
    #[error("query `{0}` already has an open reservation")]
    AlreadyReserved(String),
    #[error("query `{0}` has no open reservation")]
    NotReserved(String),
    #[error("digest chain broken at line {line}: {reason}")]
    ChainBroken { line: usize, reason: String },
    #[error("ledger I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for LedgerError {
    fn from(e: std::io::Error) -> Self {
        LedgerError::Io(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub project_id: ProjectId,
    pub researcher: String,
    pub title: String,
    pub dataset_id: DatasetId,
    pub created: DateTime<Utc>,
    /// Mirror of the latest proposal state.
    pub status: String,
    #[serde(default)]
    pub proposals_approved: u32,
    #[serde(default)]
    pub proposals_rejected: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Reserved,
    Committed,
    Void,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub entry_id: u64,
    pub timestamp: DateTime<Utc>,
    pub project_id: ProjectId,
    pub dataset_id: DatasetId,
    /// Ledger key of the query, `<proposal>/<query>`.
    pub query_id: String,
    pub epsilon: PrivacyCost,
    pub phase: Phase,
    /// For committed and void entries, the reserved entry they resolve.
    pub resolves: Option<u64>,
    pub prev_digest: String,
    pub digest: String,
}

#[derive(Serialize)]
struct EntryBody<'a> {
    entry_id: u64,
    timestamp: &'a DateTime<Utc>,
    project_id: &'a ProjectId,
    dataset_id: &'a DatasetId,
    query_id: &'a str,
    epsilon: PrivacyCost,
    phase: Phase,
    resolves: Option<u64>,
    prev_digest: &'a str,
}

impl LedgerEntry {
    fn body_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&EntryBody {
            entry_id: self.entry_id,
            timestamp: &self.timestamp,
            project_id: &self.project_id,
            dataset_id: &self.dataset_id,
            query_id: &self.query_id,
            epsilon: self.epsilon,
            phase: self.phase,
            resolves: self.resolves,
            prev_digest: &self.prev_digest,
        })
        .expect("entry serializes")
    }

    pub fn expected_digest(&self) -> String {
        link_digest(&self.prev_digest, &self.body_bytes())
    }
}

/// Handle for a set of reserved entries awaiting commit or void.
#[derive(Clone, Debug, PartialEq)]
pub struct Reservation {
    pub project_id: ProjectId,
    pub entries: Vec<LedgerEntry>,
}

#[derive(Debug, Error)]
pub enum ExecutionFailure<E> {
    #[error(transparent)]
    Ledger(LedgerError),
    #[error("execution failed; reservation voided")]
    Execution(E),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProjectTotal {
    pub project_id: ProjectId,
    pub total_epsilon: f64,
    pub committed_queries: usize,
    pub proposals_approved: u32,
    pub proposals_rejected: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetTotal {
    pub dataset_id: DatasetId,
    pub total_epsilon: f64,
    pub projects: Vec<ProjectTotal>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GlobalReport {
    pub datasets: Vec<DatasetTotal>,
    pub grand_total: f64,
    pub proposals_approved: u32,
    pub proposals_rejected: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub entries: usize,
    pub head_digest: String,
    /// A torn (unterminated, unparsable) final line left by a crash.
    pub torn_tail: bool,
}

#[derive(Default)]
struct Inner {
    entries: Vec<LedgerEntry>,
    projects: BTreeMap<ProjectId, Project>,
    /// Open reservations by query key: entry id of the reserved entry.
    open: HashMap<String, u64>,
    committed: HashMap<String, u64>,
    log: Option<File>,
    dir: Option<PathBuf>,
}

impl Inner {
    fn head(&self) -> &str {
        self.entries.last().map_or(GENESIS_DIGEST, |e| e.digest.as_str())
    }

    fn build(&self, project: &Project, key: &str, epsilon: PrivacyCost, phase: Phase, resolves: Option<u64>, prev: &str, id: u64) -> LedgerEntry {
        let mut e = LedgerEntry {
            entry_id: id,
            timestamp: Utc::now(),
            project_id: project.project_id.clone(),
            dataset_id: project.dataset_id.clone(),
            query_id: key.to_string(),
            epsilon,
            phase,
            resolves,
            prev_digest: prev.to_string(),
            digest: String::new(),
        };
        e.digest = e.expected_digest();
        e
    }

    /// Writes the batch in one append and fsync, then applies it in memory.
    fn append(&mut self, batch: Vec<LedgerEntry>) -> Result<Vec<LedgerEntry>, LedgerError> {
        if let Some(log) = self.log.as_mut() {
            let mut buf = Vec::new();
            for e in &batch {
                serde_json::to_writer(&mut buf, e).expect("entry serializes");
                buf.push(b'\n');
            }
            log.write_all(&buf)?;
            log.sync_data()?;
        }
        for e in &batch {
            self.apply(e.clone());
        }
        Ok(batch)
    }

    fn apply(&mut self, e: LedgerEntry) {
        match e.phase {
            Phase::Reserved => {
                self.open.insert(e.query_id.clone(), e.entry_id);
            }
            Phase::Committed => {
                self.open.remove(&e.query_id);
                self.committed.insert(e.query_id.clone(), e.entry_id);
            }
            Phase::Void => {
                self.open.remove(&e.query_id);
            }
        }
        self.entries.push(e);
    }

    fn save_projects(&self) -> Result<(), LedgerError> {
        if let Some(dir) = &self.dir {
            let projects: Vec<&Project> = self.projects.values().collect();
            write_atomic(&dir.join(PROJECTS_FILE), &serde_json::to_vec_pretty(&projects).expect("serializes"))?;
        }
        Ok(())
    }

    fn project(&self, id: &ProjectId) -> Result<&Project, LedgerError> {
        self.projects.get(id).ok_or_else(|| LedgerError::NotFound(id.clone()))
    }
}

/// Thread-safe ledger. All mutations take the single writer lock; reads see
/// committed state.
pub struct Ledger {
    inner: RwLock<Inner>,
}

impl Ledger {
    pub fn in_memory() -> Self {
        Ledger { inner: RwLock::new(Inner::default()) }
    }

    /// Opens (or creates) the ledger in `dir`, verifying the digest chain.
    /// A torn final line from an interrupted append is truncated away.
    pub fn open(dir: &Path) -> Result<Self, LedgerError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LEDGER_FILE);
        let mut inner = Inner { dir: Some(dir.to_path_buf()), ..Inner::default() };
        if path.exists() {
            let (entries, report, valid_len) = read_chain(&path)?;
            if report.torn_tail {
                let f = OpenOptions::new().write(true).open(&path)?;
                f.set_len(valid_len)?;
                f.sync_all()?;
            }
            for e in entries {
                inner.apply(e);
            }
        }
        inner.log = Some(OpenOptions::new().create(true).append(true).open(&path)?);
        let projects_path = dir.join(PROJECTS_FILE);
        if projects_path.exists() {
            let projects: Vec<Project> = serde_json::from_slice(&fs::read(&projects_path)?)
                .map_err(|e| LedgerError::Io(format!("{}: {e}", projects_path.display())))?;
            inner.projects = projects.into_iter().map(|p| (p.project_id.clone(), p)).collect();
        }
        Ok(Ledger { inner: RwLock::new(inner) })
    }

    pub fn open_project(&self, researcher: &str, title: &str, dataset_id: &DatasetId) -> Result<Project, LedgerError> {
        if title.trim().is_empty() {
            return Err(LedgerError::Validation("project title is required".into()));
        }
        if researcher.trim().is_empty() {
            return Err(LedgerError::Validation("researcher identity is required".into()));
        }
        let mut inner = self.inner.write();
        // Random ids; on collision draw again.
        let project_id = loop {
            let candidate = ProjectId::new(format!("prj-{:08x}", rand::random::<u32>()));
            if !inner.projects.contains_key(&candidate) {
                break candidate;
            }
        };
        let project = Project {
            project_id: project_id.clone(),
            researcher: researcher.to_string(),
            title: title.trim().to_string(),
            dataset_id: dataset_id.clone(),
            created: Utc::now(),
            status: "open".to_string(),
            proposals_approved: 0,
            proposals_rejected: 0,
        };
        inner.projects.insert(project_id, project.clone());
        inner.save_projects()?;
        Ok(project)
    }

    pub fn project(&self, id: &ProjectId) -> Result<Project, LedgerError> {
        self.inner.read().project(id).cloned()
    }

    pub fn projects(&self) -> Vec<Project> {
        self.inner.read().projects.values().cloned().collect()
    }

    pub fn set_status(&self, id: &ProjectId, status: &str) -> Result<(), LedgerError> {
        let mut inner = self.inner.write();
        let p = inner.projects.get_mut(id).ok_or_else(|| LedgerError::NotFound(id.clone()))?;
        p.status = status.to_string();
        inner.save_projects()
    }

    pub fn record_decision(&self, id: &ProjectId, approved: bool) -> Result<(), LedgerError> {
        let mut inner = self.inner.write();
        let p = inner.projects.get_mut(id).ok_or_else(|| LedgerError::NotFound(id.clone()))?;
        if approved {
            p.proposals_approved += 1;
        } else {
            p.proposals_rejected += 1;
        }
        inner.save_projects()
    }

    /// Appends reserved entries for every `(key, ε)` or none at all.
    pub fn reserve(&self, project_id: &ProjectId, costs: &[(String, PrivacyCost)]) -> Result<Reservation, LedgerError> {
        let mut inner = self.inner.write();
        let project = inner.project(project_id)?.clone();
        if costs.is_empty() {
            return Err(LedgerError::Validation("nothing to reserve".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (key, _) in costs {
            if !seen.insert(key) {
                return Err(LedgerError::Validation(format!("query `{key}` listed twice")));
            }
            if inner.committed.contains_key(key) {
                return Err(LedgerError::DoubleCommit(key.clone()));
            }
            if inner.open.contains_key(key) {
                return Err(LedgerError::AlreadyReserved(key.clone()));
            }
        }
        let mut prev = inner.head().to_string();
        let mut next_id = inner.entries.last().map_or(1, |e| e.entry_id + 1);
        let mut batch = Vec::with_capacity(costs.len());
        for (key, eps) in costs {
            let e = inner.build(&project, key, *eps, Phase::Reserved, None, &prev, next_id);
            prev = e.digest.clone();
            next_id += 1;
            batch.push(e);
        }
        let entries = inner.append(batch)?;
        Ok(Reservation { project_id: project_id.clone(), entries })
    }

    pub fn commit(&self, reservation: &Reservation) -> Result<Vec<LedgerEntry>, LedgerError> {
        self.resolve(reservation, Phase::Committed)
    }

    pub fn void(&self, reservation: &Reservation) -> Result<Vec<LedgerEntry>, LedgerError> {
        self.resolve(reservation, Phase::Void)
    }

    fn resolve(&self, reservation: &Reservation, phase: Phase) -> Result<Vec<LedgerEntry>, LedgerError> {
        let mut inner = self.inner.write();
        let project = inner.project(&reservation.project_id)?.clone();
        for r in &reservation.entries {
            if inner.open.get(&r.query_id) != Some(&r.entry_id) {
                return Err(LedgerError::NotReserved(r.query_id.clone()));
            }
        }
        let mut prev = inner.head().to_string();
        let mut next_id = inner.entries.last().map_or(1, |e| e.entry_id + 1);
        let mut batch = Vec::with_capacity(reservation.entries.len());
        for r in &reservation.entries {
            let e = inner.build(&project, &r.query_id, r.epsilon, phase, Some(r.entry_id), &prev, next_id);
            prev = e.digest.clone();
            next_id += 1;
            batch.push(e);
        }
        inner.append(batch)
    }

    /// Reserve, run `execute`, then commit on success or void on failure.
    pub fn reserve_and_commit<T, E>(
        &self,
        project_id: &ProjectId,
        costs: &[(String, PrivacyCost)],
        execute: impl FnOnce() -> Result<T, E>,
    ) -> Result<(T, Vec<LedgerEntry>), ExecutionFailure<E>> {
        let reservation = self.reserve(project_id, costs).map_err(ExecutionFailure::Ledger)?;
        match execute() {
            Ok(value) => {
                let committed = self.commit(&reservation).map_err(ExecutionFailure::Ledger)?;
                Ok((value, committed))
            }
            Err(e) => {
                self.void(&reservation).map_err(ExecutionFailure::Ledger)?;
                Err(ExecutionFailure::Execution(e))
            }
        }
    }

    /// Voids reservations that were never resolved and are older than `older_than`.
    pub fn recover(&self, older_than: Duration) -> Result<Vec<LedgerEntry>, LedgerError> {
        let cutoff = Utc::now() - older_than;
        let dangling: Vec<LedgerEntry> = {
            let inner = self.inner.read();
            let mut open: Vec<&LedgerEntry> = inner
                .open
                .values()
                .filter_map(|id| inner.entries.iter().find(|e| e.entry_id == *id))
                .filter(|e| e.timestamp <= cutoff)
                .collect();
            open.sort_by_key(|e| e.entry_id);
            open.into_iter().cloned().collect()
        };
        let mut voided = Vec::new();
        let mut by_project: BTreeMap<ProjectId, Vec<LedgerEntry>> = BTreeMap::new();
        for e in dangling {
            by_project.entry(e.project_id.clone()).or_default().push(e);
        }
        for (project_id, entries) in by_project {
            voided.extend(self.void(&Reservation { project_id, entries })?);
        }
        Ok(voided)
    }

    /// Keys with an open reservation for a given key prefix.
    pub fn open_reservations(&self, prefix: &str) -> Vec<LedgerEntry> {
        let inner = self.inner.read();
        let mut v: Vec<LedgerEntry> = inner
            .open
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .filter_map(|(_, id)| inner.entries.iter().find(|e| e.entry_id == *id).cloned())
            .collect();
        v.sort_by_key(|e| e.entry_id);
        v
    }

    /// Committed entries whose key starts with `prefix`.
    pub fn committed_with_prefix(&self, prefix: &str) -> Vec<LedgerEntry> {
        self.inner
            .read()
            .entries
            .iter()
            .filter(|e| e.phase == Phase::Committed && e.query_id.starts_with(prefix))
            .cloned()
            .collect()
    }

    /// Sum of committed ε for the project.
    pub fn total_spent(&self, project_id: &ProjectId) -> Result<f64, LedgerError> {
        let inner = self.inner.read();
        inner.project(project_id)?;
        Ok(committed_total(inner.entries.iter().filter(|e| &e.project_id == project_id)))
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.inner.read().entries.clone()
    }

    pub fn global_report(&self) -> GlobalReport {
        let inner = self.inner.read();
        let mut by_dataset: BTreeMap<DatasetId, BTreeMap<ProjectId, ProjectTotal>> = BTreeMap::new();
        let mut report = GlobalReport::default();
        for p in inner.projects.values() {
            report.proposals_approved += p.proposals_approved;
            report.proposals_rejected += p.proposals_rejected;
        }
        let mut eps_by_project: BTreeMap<ProjectId, Vec<f64>> = BTreeMap::new();
        for e in inner.entries.iter().filter(|e| e.phase == Phase::Committed) {
            eps_by_project.entry(e.project_id.clone()).or_default().push(e.epsilon.epsilon());
            let project = inner.projects.get(&e.project_id);
            let slot = by_dataset.entry(e.dataset_id.clone()).or_default().entry(e.project_id.clone()).or_insert_with(|| {
                ProjectTotal {
                    project_id: e.project_id.clone(),
                    proposals_approved: project.map_or(0, |p| p.proposals_approved),
                    proposals_rejected: project.map_or(0, |p| p.proposals_rejected),
                    ..ProjectTotal::default()
                }
            });
            slot.committed_queries += 1;
        }
        let mut all = Vec::new();
        for (dataset_id, projects) in by_dataset {
            let mut ds = DatasetTotal { dataset_id, ..DatasetTotal::default() };
            let mut ds_values = Vec::new();
            for (pid, mut total) in projects {
                let values = &eps_by_project[&pid];
                total.total_epsilon = exact_sum(values.iter().copied());
                ds_values.extend(values.iter().copied());
                ds.projects.push(total);
            }
            ds.total_epsilon = exact_sum(ds_values.iter().copied());
            all.extend(ds_values);
            report.datasets.push(ds);
        }
        report.grand_total = exact_sum(all);
        report
    }
}

fn committed_total<'a>(entries: impl Iterator<Item = &'a LedgerEntry>) -> f64 {
    exact_sum(entries.filter(|e| e.phase == Phase::Committed).map(|e| e.epsilon.epsilon()))
}

/// Recomputes every project's committed total by scanning the file directly.
pub fn scan_totals(path: &Path) -> Result<BTreeMap<ProjectId, f64>, LedgerError> {
    let (entries, _, _) = read_chain(path)?;
    let mut by: BTreeMap<ProjectId, Vec<f64>> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.phase == Phase::Committed) {
        by.entry(e.project_id.clone()).or_default().push(e.epsilon.epsilon());
    }
    Ok(by.into_iter().map(|(k, v)| (k, exact_sum(v))).collect())
}

/// Verifies the digest chain and the phase-ordering rules of a ledger file.
pub fn verify_file(path: &Path) -> Result<VerifyReport, LedgerError> {
    read_chain(path).map(|(_, report, _)| report)
}

/// Parses and checks the file. Returns the entries, a report and the byte
/// length of the valid prefix.
fn read_chain(path: &Path) -> Result<(Vec<LedgerEntry>, VerifyReport, u64), LedgerError> {
    let bytes = fs::read(path)?;
    let reader = BufReader::new(bytes.as_slice());
    let mut entries: Vec<LedgerEntry> = Vec::new();
    let mut prev = GENESIS_DIGEST.to_string();
    let mut reserved: HashMap<u64, (String, u64)> = HashMap::new();
    let mut resolved: HashMap<u64, Phase> = HashMap::new();
    let mut committed_keys: HashMap<String, u64> = HashMap::new();
    let mut offset = 0u64;
    let mut torn_tail = false;
    for (i, line) in reader.split(b'\n').enumerate() {
        let line_no = i + 1;
        let line = line?;
        let terminated = offset + line.len() as u64 + 1 <= bytes.len() as u64;
        if line.is_empty() && !terminated {
            break;
        }
        let entry: LedgerEntry = match serde_json::from_slice(&line) {
            Ok(e) => e,
            Err(err) if !terminated => {
                let _ = err;
                torn_tail = true;
                break;
            }
            Err(err) => return Err(LedgerError::ChainBroken { line: line_no, reason: format!("unparsable entry: {err}") }),
        };
        if entry.prev_digest != prev {
            return Err(LedgerError::ChainBroken { line: line_no, reason: "previous digest mismatch".into() });
        }
        if entry.expected_digest() != entry.digest {
            return Err(LedgerError::ChainBroken { line: line_no, reason: "entry digest mismatch".into() });
        }
        if let Some(last) = entries.last() {
            if entry.entry_id <= last.entry_id {
                return Err(LedgerError::ChainBroken { line: line_no, reason: "entry ids not increasing".into() });
            }
        }
        match entry.phase {
            Phase::Reserved => {
                if committed_keys.contains_key(&entry.query_id) {
                    return Err(LedgerError::ChainBroken { line: line_no, reason: "reservation after commit".into() });
                }
                reserved.insert(entry.entry_id, (entry.query_id.clone(), entry.epsilon.epsilon().to_bits()));
            }
            Phase::Committed | Phase::Void => {
                let target = entry.resolves.ok_or_else(|| LedgerError::ChainBroken {
                    line: line_no,
                    reason: "resolution without reservation reference".into(),
                })?;
                match reserved.get(&target) {
                    Some((key, eps)) if *key == entry.query_id && *eps == entry.epsilon.epsilon().to_bits() => {}
                    _ => {
                        return Err(LedgerError::ChainBroken {
                            line: line_no,
                            reason: "resolution does not match an earlier reservation".into(),
                        })
                    }
                }
                if resolved.insert(target, entry.phase).is_some() {
                    return Err(LedgerError::ChainBroken { line: line_no, reason: "reservation resolved twice".into() });
                }
                if entry.phase == Phase::Committed {
                    committed_keys.insert(entry.query_id.clone(), entry.entry_id);
                }
            }
        }
        prev = entry.digest.clone();
        entries.push(entry);
        offset += line.len() as u64 + 1;
    }
    let report = VerifyReport { entries: entries.len(), head_digest: prev, torn_tail };
    Ok((entries, report, offset))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
