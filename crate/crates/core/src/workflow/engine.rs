use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Utc;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    validate_adjustment, Actor, AdjustmentRow, Decision, DecisionKind, DryRunFinding, FindingCode, Proposal,
    ProposalState, RecordedDecision, ReportRow, ReviewReport, RevisionSnapshot, Role, Transition, WorkflowError,
};
use crate::data::{ConfidentialDataset, PublicDataset, Query, Schema};
use crate::ids::{DatasetId, ProjectId, ProposalId};
use crate::ledger::{exact_sum, write_atomic, Ledger, LedgerError, Reservation};
use crate::mechanisms::{MechanismConfig, MechanismResult, NoiseDetail, Prepared, PrivacyCost};
use crate::release::{DisclosureConfig, Release, ReleaseInput};
use crate::rng::RandomSource;
use crate::translation::{translate, AccuracySpec, SimulationSettings, Translation};

/// Places where a test can stop `execute` as if the process had died.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrashPoint {
    AfterReserve,
    /// Not a crash: the mechanism run reports failure and the normal
    /// failure path (void, stay approved) runs.
    MechanismFailure,
    AfterMechanisms,
    AfterStaging,
    AfterCommit,
    AfterExecuted,
    AfterReleasePersisted,
}

impl CrashPoint {
    pub const ALL: [CrashPoint; 7] = [
        CrashPoint::AfterReserve,
        CrashPoint::MechanismFailure,
        CrashPoint::AfterMechanisms,
        CrashPoint::AfterStaging,
        CrashPoint::AfterCommit,
        CrashPoint::AfterExecuted,
        CrashPoint::AfterReleasePersisted,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkflowSettings {
    pub simulation: SimulationSettings,
    pub mechanism: MechanismConfig,
    pub disclosure: DisclosureConfig,
    /// Per-dataset advisory ε threshold; flags reports, never blocks.
    pub advisory_thresholds: BTreeMap<DatasetId, f64>,
    pub default_advisory_threshold: Option<f64>,
}

impl Default for WorkflowSettings {
    fn default() -> Self {
        WorkflowSettings {
            simulation: SimulationSettings::default(),
            mechanism: MechanismConfig::default(),
            disclosure: DisclosureConfig::default(),
            advisory_thresholds: BTreeMap::new(),
            default_advisory_threshold: Some(1.0),
        }
    }
}

impl WorkflowSettings {
    fn threshold(&self, dataset: &DatasetId) -> Option<f64> {
        self.advisory_thresholds.get(dataset).copied().or(self.default_advisory_threshold)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub queries: Vec<Query>,
    pub specs: Vec<AccuracySpec>,
    pub justification: String,
    #[serde(default)]
    pub planned_outputs: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub voided_reservations: usize,
    pub completed_releases: Vec<ProposalId>,
    pub reverted_to_approved: Vec<ProposalId>,
}

#[derive(Serialize, Deserialize)]
struct Staged {
    proposal_id: ProposalId,
    revision: u32,
    results: Vec<MechanismResult>,
}

/// Proposal store and state machine driver. Transitions on one proposal are
/// serialized by its lock; different proposals proceed concurrently.
pub struct Workflow {
    ledger: Arc<Ledger>,
    settings: WorkflowSettings,
    dir: Option<PathBuf>,
    proposals: RwLock<BTreeMap<ProposalId, Arc<Mutex<Proposal>>>>,
    reports: RwLock<BTreeMap<ProposalId, ReviewReport>>,
    releases: RwLock<BTreeMap<ProposalId, Release>>,
    staged: Mutex<BTreeMap<ProposalId, Vec<MechanismResult>>>,
    create_lock: Mutex<()>,
}

const PROPOSALS: &str = "proposals";
const REPORTS: &str = "reports";
const RELEASES: &str = "releases";
const STAGING: &str = "staging";

impl Workflow {
    pub fn in_memory(ledger: Arc<Ledger>, settings: WorkflowSettings) -> Self {
        Workflow {
            ledger,
            settings,
            dir: None,
            proposals: RwLock::new(BTreeMap::new()),
            reports: RwLock::new(BTreeMap::new()),
            releases: RwLock::new(BTreeMap::new()),
            staged: Mutex::new(BTreeMap::new()),
            create_lock: Mutex::new(()),
        }
    }

    /// Loads every record under `dir` and runs crash recovery.
    pub fn open(dir: &Path, ledger: Arc<Ledger>, settings: WorkflowSettings) -> Result<(Self, RecoveryReport), WorkflowError> {
        for sub in [PROPOSALS, REPORTS, RELEASES, STAGING] {
            fs::create_dir_all(dir.join(sub))?;
        }
        let mut wf = Workflow::in_memory(ledger, settings);
        wf.dir = Some(dir.to_path_buf());
        let proposals: Vec<Proposal> = load_all(&dir.join(PROPOSALS))?;
        let reports: Vec<ReviewReport> = load_all(&dir.join(REPORTS))?;
        let releases: Vec<Release> = load_all(&dir.join(RELEASES))?;
        let staged: Vec<Staged> = load_all(&dir.join(STAGING))?;
        *wf.proposals.get_mut() =
            proposals.into_iter().map(|p| (p.proposal_id.clone(), Arc::new(Mutex::new(p)))).collect();
        *wf.reports.get_mut() = reports.into_iter().map(|r| (r.proposal.proposal_id.clone(), r)).collect();
        *wf.releases.get_mut() = releases.into_iter().map(|r| (r.proposal_id.clone(), r)).collect();
        *wf.staged.get_mut() = staged.into_iter().map(|s| (s.proposal_id, s.results)).collect();
        let report = wf.recover()?;
        Ok((wf, report))
    }

    pub fn ledger(&self) -> &Arc<Ledger> {
        &self.ledger
    }

    pub fn settings(&self) -> &WorkflowSettings {
        &self.settings
    }

    fn handle(&self, id: &ProposalId) -> Result<Arc<Mutex<Proposal>>, WorkflowError> {
        self.proposals
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| WorkflowError::NotFound { kind: "proposal", id: id.to_string() })
    }

    pub fn proposal(&self, id: &ProposalId) -> Result<Proposal, WorkflowError> {
        Ok(self.handle(id)?.lock().clone())
    }

    pub fn proposals(&self) -> Vec<Proposal> {
        self.proposals.read().values().map(|p| p.lock().clone()).collect()
    }

    pub fn proposals_for_project(&self, project: &ProjectId) -> Vec<Proposal> {
        self.proposals().into_iter().filter(|p| &p.project_id == project).collect()
    }

    /// Proposals awaiting a reviewer.
    pub fn review_queue(&self) -> Vec<Proposal> {
        self.proposals()
            .into_iter()
            .filter(|p| matches!(p.state, ProposalState::Submitted | ProposalState::UnderReview))
            .collect()
    }

    pub fn report(&self, actor: &Actor, id: &ProposalId) -> Result<ReviewReport, WorkflowError> {
        require(actor, &[Role::Reviewer, Role::Admin], "review reports are for reviewers")?;
        let mut report = self
            .reports
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| WorkflowError::NotFound { kind: "review report", id: id.to_string() })?;
        // the stored copy is a snapshot from compile time
        report.proposal = self.proposal(id)?;
        Ok(report)
    }

    pub fn release(&self, id: &ProposalId) -> Option<Release> {
        self.releases.read().get(id).cloned()
    }

    /// Most recent release of the project.
    pub fn latest_release(&self, project: &ProjectId) -> Option<Release> {
        self.releases.read().values().filter(|r| &r.project_id == project).max_by_key(|r| r.released_at).cloned()
    }

    pub fn submit(
        &self,
        actor: &Actor,
        project_id: &ProjectId,
        request: SubmitRequest,
        schema: &Schema,
    ) -> Result<Proposal, WorkflowError> {
        require(actor, &[Role::Researcher], "only researchers submit proposals")?;
        let project = self.ledger.project(project_id).map_err(not_found)?;
        if project.researcher != actor.id {
            return Err(WorkflowError::Forbidden("project belongs to another researcher".into()));
        }
        if project.dataset_id != schema.dataset_id {
            return Err(WorkflowError::Validation("schema does not belong to the project's dataset".into()));
        }
        validate_request(&request, schema)?;

        let _guard = self.create_lock.lock();
        let n = self.proposals.read().values().filter(|p| p.lock().project_id == *project_id).count();
        let proposal_id = ProposalId::new(format!("{project_id}-p{}", n + 1));
        let now = Utc::now();
        let mut proposal = Proposal {
            proposal_id: proposal_id.clone(),
            project_id: project_id.clone(),
            dataset_id: project.dataset_id.clone(),
            researcher: actor.id.clone(),
            revision: 1,
            queries: request.queries,
            specs: request.specs,
            justification: request.justification.trim().to_string(),
            planned_outputs: request.planned_outputs,
            state: ProposalState::Draft,
            version: 0,
            history: vec![Transition {
                from: None,
                to: ProposalState::Draft,
                actor: actor.id.clone(),
                role: actor.role,
                at: now,
                revision: 1,
                note: None,
            }],
            adjusted_specs: None,
            reviewer_note: None,
            previous_revisions: Vec::new(),
        };
        self.transition(&mut proposal, ProposalState::Submitted, actor, None)?;
        self.proposals.write().insert(proposal_id, Arc::new(Mutex::new(proposal.clone())));
        Ok(proposal)
    }

    /// Translates every query, dry-runs them without noise on the
    /// confidential data and files the reviewer report. Translation seeds are
    /// derived from the proposal and query ids, so re-translating after an
    /// adjustment uses the same simulated noise.
    pub fn compile_report(
        &self,
        id: &ProposalId,
        confidential: &ConfidentialDataset,
        synthetic: &PublicDataset,
    ) -> Result<ReviewReport, WorkflowError> {
        let handle = self.handle(id)?;
        let mut proposal = handle.lock();
        if proposal.state != ProposalState::Submitted {
            return Err(WorkflowError::IllegalTransition { from: proposal.state, to: ProposalState::UnderReview });
        }
        if confidential.schema().dataset_id != proposal.dataset_id || synthetic.schema().dataset_id != proposal.dataset_id {
            return Err(WorkflowError::Validation("datasets do not match the proposal".into()));
        }
        let config = &self.settings.mechanism;
        let mut rows = Vec::with_capacity(proposal.queries.len());
        for (query, spec) in proposal.queries.iter().zip(&proposal.specs) {
            let translation = self.translate_one(&proposal.proposal_id, query, spec, synthetic)?;
            let findings = dry_run(query, spec, &translation, confidential, config)?;
            rows.push(ReportRow { query_id: query.query_id.clone(), statistic: query.statistic(), spec: *spec, translation, findings });
        }
        let total_epsilon = exact_sum(rows.iter().filter_map(|r| r.translation.epsilon()).map(|e| e.epsilon()));
        let infeasible_queries =
            rows.iter().filter(|r| r.translation.epsilon().is_none()).map(|r| r.query_id.clone()).collect();
        let project_spent = self.ledger.total_spent(&proposal.project_id).map_err(not_found)?;
        let advisory_threshold = self.settings.threshold(&proposal.dataset_id);
        let advisory_exceeded = advisory_threshold.is_some_and(|t| project_spent + total_epsilon > t);

        self.transition(&mut proposal, ProposalState::UnderReview, &Actor::system(), None)?;
        let report = ReviewReport {
            proposal: proposal.clone(),
            compiled_at: Utc::now(),
            rows,
            total_epsilon,
            infeasible_queries,
            project_spent,
            advisory_threshold,
            advisory_exceeded,
            adjustment_preview: None,
            decision: None,
        };
        self.store_report(&report)?;
        Ok(report)
    }

    fn translate_one(
        &self,
        proposal_id: &ProposalId,
        query: &Query,
        spec: &AccuracySpec,
        synthetic: &PublicDataset,
    ) -> Result<Translation, WorkflowError> {
        let mut rng = RandomSource::seeded(key_seed(proposal_id.as_str(), query.query_id.as_str()));
        Ok(translate(query, spec, synthetic, &self.settings.simulation, &self.settings.mechanism, &mut rng)?)
    }

    pub fn decide(
        &self,
        actor: &Actor,
        id: &ProposalId,
        decision: Decision,
        synthetic: &PublicDataset,
        expected_version: Option<u64>,
    ) -> Result<Proposal, WorkflowError> {
        require(actor, &[Role::Reviewer], "only reviewers decide proposals")?;
        let handle = self.handle(id)?;
        let mut proposal = handle.lock();
        check_version(&proposal, expected_version)?;
        let mut report = self.reports.read().get(id).cloned().ok_or_else(|| WorkflowError::NotFound {
            kind: "review report",
            id: id.to_string(),
        })?;
        let target = match &decision.kind {
            DecisionKind::Approve => ProposalState::Approved,
            DecisionKind::Reject => ProposalState::Rejected,
            DecisionKind::Adjust { .. } => ProposalState::ChangesRequested,
        };
        if proposal.state != ProposalState::UnderReview {
            return Err(WorkflowError::IllegalTransition { from: proposal.state, to: target });
        }
        match &decision.kind {
            DecisionKind::Approve => {
                if !report.infeasible_queries.is_empty() {
                    return Err(WorkflowError::Validation(
                        "cannot approve: some accuracy requirements are infeasible; reject or adjust".into(),
                    ));
                }
            }
            DecisionKind::Reject => {}
            DecisionKind::Adjust { specs } => {
                validate_adjustment(&proposal.specs, specs)?;
                let mut preview = Vec::with_capacity(specs.len());
                for (query, spec) in proposal.queries.iter().zip(specs) {
                    let translation = self.translate_one(&proposal.proposal_id, query, spec, synthetic)?;
                    preview.push(AdjustmentRow { query_id: query.query_id.clone(), spec: *spec, translation });
                }
                report.adjustment_preview = Some(preview);
                proposal.adjusted_specs = Some(specs.clone());
            }
        }
        proposal.reviewer_note = decision.note.clone();
        self.transition(&mut proposal, target, actor, decision.note.clone())?;
        match target {
            ProposalState::Approved => self.ledger.record_decision(&proposal.project_id, true)?,
            ProposalState::Rejected => self.ledger.record_decision(&proposal.project_id, false)?,
            _ => {}
        }
        report.decision = Some(RecordedDecision { decision, reviewer: actor.id.clone(), at: Utc::now() });
        self.store_report(&report)?;
        Ok(proposal.clone())
    }

    pub fn respond_adjustment(&self, actor: &Actor, id: &ProposalId, accept: bool) -> Result<Proposal, WorkflowError> {
        require(actor, &[Role::Researcher], "only the researcher responds to adjustments")?;
        let handle = self.handle(id)?;
        let mut proposal = handle.lock();
        if proposal.researcher != actor.id {
            return Err(WorkflowError::Forbidden("proposal belongs to another researcher".into()));
        }
        let target = if accept { ProposalState::Submitted } else { ProposalState::Withdrawn };
        if proposal.state != ProposalState::ChangesRequested {
            return Err(WorkflowError::IllegalTransition { from: proposal.state, to: target });
        }
        if accept {
            let specs = proposal.adjusted_specs.take().expect("changes requested carries specs");
            let old = std::mem::replace(&mut proposal.specs, specs);
            let revision = proposal.revision;
            proposal.previous_revisions.push(RevisionSnapshot { revision, specs: old });
            proposal.revision += 1;
        }
        self.transition(&mut proposal, target, actor, None)?;
        Ok(proposal.clone())
    }

    pub fn execute(
        &self,
        actor: &Actor,
        id: &ProposalId,
        confidential: &ConfidentialDataset,
        rng: &mut RandomSource,
    ) -> Result<Release, WorkflowError> {
        self.execute_with(actor, id, confidential, rng, None)
    }

    /// Execute with an optional injected crash point (tests).
    ///
    /// Order: reserve, run, stage results, commit, Executed, persist release,
    /// Released. Nothing researcher-visible exists before the commit.
    pub fn execute_with(
        &self,
        actor: &Actor,
        id: &ProposalId,
        confidential: &ConfidentialDataset,
        rng: &mut RandomSource,
        crash: Option<CrashPoint>,
    ) -> Result<Release, WorkflowError> {
        require(actor, &[Role::Reviewer, Role::Admin], "execution is triggered by a reviewer or admin")?;
        let handle = self.handle(id)?;
        let mut proposal = handle.lock();
        if proposal.state != ProposalState::Approved {
            return Err(WorkflowError::IllegalTransition { from: proposal.state, to: ProposalState::Executed });
        }
        if confidential.schema().dataset_id != proposal.dataset_id {
            return Err(WorkflowError::Validation("dataset does not match the proposal".into()));
        }
        let report = self.reports.read().get(id).cloned().ok_or_else(|| WorkflowError::NotFound {
            kind: "review report",
            id: id.to_string(),
        })?;
        let mut costs = Vec::with_capacity(report.rows.len());
        for row in &report.rows {
            let eps = row.translation.epsilon().ok_or_else(|| WorkflowError::Validation("infeasible query".into()))?;
            costs.push((ledger_key(id, row.query_id.as_str()), eps));
        }
        let hit = |p: CrashPoint| crash == Some(p);

        let reservation = self.ledger.reserve(&proposal.project_id, &costs)?;
        if hit(CrashPoint::AfterReserve) {
            return Err(WorkflowError::Crashed(CrashPoint::AfterReserve));
        }
        let results = match self.run_all(&proposal, &costs, confidential, rng, hit(CrashPoint::MechanismFailure)) {
            Ok(r) => r,
            Err(e) => {
                self.ledger.void(&reservation)?;
                return Err(e);
            }
        };
        if hit(CrashPoint::AfterMechanisms) {
            return Err(WorkflowError::Crashed(CrashPoint::AfterMechanisms));
        }
        self.stage(&proposal, &results)?;
        if hit(CrashPoint::AfterStaging) {
            return Err(WorkflowError::Crashed(CrashPoint::AfterStaging));
        }
        self.ledger.commit(&reservation)?;
        if hit(CrashPoint::AfterCommit) {
            return Err(WorkflowError::Crashed(CrashPoint::AfterCommit));
        }
        self.transition(&mut proposal, ProposalState::Executed, actor, None)?;
        if hit(CrashPoint::AfterExecuted) {
            return Err(WorkflowError::Crashed(CrashPoint::AfterExecuted));
        }
        let release = self.publish(&mut proposal, &results, actor, hit(CrashPoint::AfterReleasePersisted))?;
        Ok(release)
    }

    fn run_all(
        &self,
        proposal: &Proposal,
        costs: &[(String, PrivacyCost)],
        confidential: &ConfidentialDataset,
        rng: &mut RandomSource,
        fail: bool,
    ) -> Result<Vec<MechanismResult>, WorkflowError> {
        if fail {
            return Err(WorkflowError::Execution("mechanism failure (injected)".into()));
        }
        let config = &self.settings.mechanism;
        proposal
            .queries
            .iter()
            .zip(costs)
            .map(|(q, (_, eps))| {
                let prepared = Prepared::build(q, confidential, config)
                    .map_err(|e| WorkflowError::Execution(format!("query {}: {e}", q.query_id)))?;
                Ok(prepared.privatize(&q.query_id, *eps, &mut rng.fork(), config))
            })
            .collect()
    }

    // Builds and persists the release, then moves Executed -> Released.
    fn publish(
        &self,
        proposal: &mut Proposal,
        results: &[MechanismResult],
        actor: &Actor,
        crash_before_state: bool,
    ) -> Result<Release, WorkflowError> {
        let release = match self.releases.read().get(&proposal.proposal_id) {
            Some(r) => r.clone(),
            None => Release::build(
                ReleaseInput {
                    proposal_id: &proposal.proposal_id,
                    project_id: &proposal.project_id,
                    dataset_id: &proposal.dataset_id,
                    revision: proposal.revision,
                    queries: &proposal.queries,
                    specs: &proposal.specs,
                    results,
                },
                self.settings.disclosure,
                Utc::now(),
            ),
        };
        if let Some(dir) = &self.dir {
            write_json(&dir.join(RELEASES).join(file_name(&proposal.proposal_id)), &release)?;
        }
        self.releases.write().insert(proposal.proposal_id.clone(), release.clone());
        if crash_before_state {
            return Err(WorkflowError::Crashed(CrashPoint::AfterReleasePersisted));
        }
        self.transition(proposal, ProposalState::Released, actor, None)?;
        self.unstage(&proposal.proposal_id)?;
        Ok(release)
    }

    fn stage(&self, proposal: &Proposal, results: &[MechanismResult]) -> Result<(), WorkflowError> {
        if let Some(dir) = &self.dir {
            let staged = Staged { proposal_id: proposal.proposal_id.clone(), revision: proposal.revision, results: results.to_vec() };
            write_json(&dir.join(STAGING).join(file_name(&proposal.proposal_id)), &staged)?;
        }
        self.staged.lock().insert(proposal.proposal_id.clone(), results.to_vec());
        Ok(())
    }

    fn unstage(&self, id: &ProposalId) -> Result<(), WorkflowError> {
        self.staged.lock().remove(id);
        if let Some(dir) = &self.dir {
            let path = dir.join(STAGING).join(file_name(id));
            if path.exists() {
                fs::remove_file(path)?;
            }
        }
        Ok(())
    }

    /// Brings every proposal to a consistent state after a restart.
    ///
    /// Open reservations are voided and staged results discarded, leaving the
    /// proposal Approved and re-executable. When the ledger already holds
    /// commits for every query, the staged results are released.
    pub fn recover(&self) -> Result<RecoveryReport, WorkflowError> {
        let mut out = RecoveryReport::default();
        let handles: Vec<Arc<Mutex<Proposal>>> = self.proposals.read().values().cloned().collect();
        for handle in handles {
            let mut proposal = handle.lock();
            let id = proposal.proposal_id.clone();
            let prefix = format!("{id}/");
            let open = self.ledger.open_reservations(&prefix);
            if !open.is_empty() {
                out.voided_reservations += open.len();
                self.ledger.void(&Reservation { project_id: proposal.project_id.clone(), entries: open })?;
            }
            let committed = self.ledger.committed_with_prefix(&prefix);
            let all_committed = !proposal.queries.is_empty() && committed.len() == proposal.queries.len();
            match proposal.state {
                ProposalState::Approved if all_committed => {
                    let results = self.staged_results(&id)?;
                    let system = Actor::system();
                    self.transition(&mut proposal, ProposalState::Executed, &system, Some("recovered".into()))?;
                    self.publish(&mut proposal, &results, &system, false)?;
                    out.completed_releases.push(id);
                }
                ProposalState::Approved => {
                    if !committed.is_empty() {
                        return Err(WorkflowError::Ledger(LedgerError::Validation(format!(
                            "proposal {id} has a partial commit"
                        ))));
                    }
                    if self.staged.lock().contains_key(&id) {
                        self.unstage(&id)?;
                        out.reverted_to_approved.push(id);
                    }
                }
                ProposalState::Executed => {
                    let results = self.staged_results(&id)?;
                    self.publish(&mut proposal, &results, &Actor::system(), false)?;
                    out.completed_releases.push(id);
                }
                _ => {
                    if self.staged.lock().contains_key(&id) {
                        self.unstage(&id)?;
                    }
                }
            }
        }
        // reservations not tied to any known proposal
        out.voided_reservations += self.ledger.recover(chrono::Duration::zero())?.len();
        Ok(out)
    }

    fn staged_results(&self, id: &ProposalId) -> Result<Vec<MechanismResult>, WorkflowError> {
        if let Some(r) = self.releases.read().get(id) {
            // release already persisted; results are not needed again
            let _ = r;
            return Ok(Vec::new());
        }
        self.staged.lock().get(id).cloned().ok_or_else(|| {
            WorkflowError::Io(format!("proposal {id} committed but its staged results are missing"))
        })
    }

    fn transition(
        &self,
        proposal: &mut Proposal,
        to: ProposalState,
        actor: &Actor,
        note: Option<String>,
    ) -> Result<(), WorkflowError> {
        if !proposal.state.can_transition(to) {
            return Err(WorkflowError::IllegalTransition { from: proposal.state, to });
        }
        let mut next = proposal.clone();
        next.history.push(Transition {
            from: Some(proposal.state),
            to,
            actor: actor.id.clone(),
            role: actor.role,
            at: Utc::now(),
            revision: proposal.revision,
            note,
        });
        next.state = to;
        next.version += 1;
        if let Some(dir) = &self.dir {
            write_json(&dir.join(PROPOSALS).join(file_name(&next.proposal_id)), &next)?;
        }
        *proposal = next;
        // Status mirror on the project; best effort, the proposal file is authoritative.
        let _ = self.ledger.set_status(&proposal.project_id, to.as_str());
        Ok(())
    }

    fn store_report(&self, report: &ReviewReport) -> Result<(), WorkflowError> {
        if let Some(dir) = &self.dir {
            write_json(&dir.join(REPORTS).join(file_name(&report.proposal.proposal_id)), report)?;
        }
        self.reports.write().insert(report.proposal.proposal_id.clone(), report.clone());
        Ok(())
    }
}

fn require(actor: &Actor, roles: &[Role], message: &str) -> Result<(), WorkflowError> {
    if roles.contains(&actor.role) {
        Ok(())
    } else {
        Err(WorkflowError::Forbidden(message.to_string()))
    }
}

fn check_version(p: &Proposal, expected: Option<u64>) -> Result<(), WorkflowError> {
    match expected {
        Some(v) if v != p.version => Err(WorkflowError::Conflict { expected: v, found: p.version }),
        _ => Ok(()),
    }
}

fn not_found(e: LedgerError) -> WorkflowError {
    match e {
        LedgerError::NotFound(id) => WorkflowError::NotFound { kind: "project", id: id.to_string() },
        other => WorkflowError::Ledger(other),
    }
}

fn validate_request(request: &SubmitRequest, schema: &Schema) -> Result<(), WorkflowError> {
    if request.justification.trim().is_empty() {
        return Err(WorkflowError::Validation("justification is required".into()));
    }
    if request.queries.is_empty() {
        return Err(WorkflowError::Validation("a proposal needs at least one query".into()));
    }
    if request.queries.len() != request.specs.len() {
        return Err(WorkflowError::Validation(format!(
            "{} queries but {} accuracy specs",
            request.queries.len(),
            request.specs.len()
        )));
    }
    let mut ids = std::collections::HashSet::new();
    for (q, s) in request.queries.iter().zip(&request.specs) {
        q.validate(schema)?;
        s.validate()?;
        if !ids.insert(&q.query_id) {
            return Err(WorkflowError::Validation(format!("duplicate query id `{}`", q.query_id)));
        }
    }
    Ok(())
}

// Noise-off run on the confidential data. Only the reviewer sees the outcome.
fn dry_run(
    query: &Query,
    spec: &AccuracySpec,
    translation: &Translation,
    confidential: &ConfidentialDataset,
    config: &MechanismConfig,
) -> Result<Vec<DryRunFinding>, WorkflowError> {
    let prepared = Prepared::build(query, confidential, config)?;
    let eps = translation.epsilon().unwrap_or(PrivacyCost::new(1.0)?);
    let exact = prepared.privatize(&query.query_id, eps, &mut RandomSource::exact(), config);
    let n = prepared.subset_size();
    let mut findings = Vec::new();
    if n == 0.0 {
        findings.push(DryRunFinding { code: FindingCode::EmptySubset, detail: "filter matches no confidential records".into() });
    }
    if let NoiseDetail::Mean { split, .. } = exact.noise_model.detail {
        // Below this size the noisy count falls under the clamp at 1 with
        // probability above beta.
        let tail = (1.0 / spec.beta).ln() / (eps.epsilon() * (1.0 - split));
        if n < 1.0 + tail {
            findings.push(DryRunFinding {
                code: FindingCode::DegenerateDenominator,
                detail: format!("subset has {n} records; noisy denominator likely clamped"),
            });
        }
    }
    if let NoiseDetail::Ols { rank_deficient: true, .. } = exact.noise_model.detail {
        findings.push(DryRunFinding {
            code: FindingCode::RankDeficient,
            detail: "design matrix of the confidential subset is rank deficient".into(),
        });
    }
    Ok(findings)
}

pub(crate) fn ledger_key(proposal: &ProposalId, query: &str) -> String {
    format!("{proposal}/{query}")
}

fn key_seed(a: &str, b: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(a.as_bytes());
    h.update(b"/");
    h.update(b.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn file_name(id: &ProposalId) -> String {
    format!("{id}.json")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), WorkflowError> {
    write_atomic(path, &serde_json::to_vec_pretty(value).expect("serializes"))?;
    Ok(())
}

fn load_all<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<Vec<T>, WorkflowError> {
    let mut out = Vec::new();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for p in paths {
        let bytes = fs::read(&p)?;
        out.push(serde_json::from_slice(&bytes).map_err(|e| WorkflowError::Io(format!("{}: {e}", p.display())))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CellValue, ColumnSpec, Dataset, Filter, Predicate, QueryKind};
    use crate::ledger::Phase;
    use crate::synthetic::generate_placeholder;

    fn schema() -> Schema {
        Schema::new(
            "ctc",
            vec![
                ColumnSpec::numeric("income", 0.0, 100.0),
                ColumnSpec::categorical("region", ["north", "south"]),
            ],
        )
        .unwrap()
    }

    fn confidential() -> ConfidentialDataset {
        // every record is in the north
        let rows = (0..200).map(|i| vec![CellValue::Num((i % 100) as f64), "north".into()]).collect();
        ConfidentialDataset::new(Dataset::from_rows(schema(), rows, true).unwrap()).unwrap()
    }

    fn synthetic() -> PublicDataset {
        generate_placeholder(&schema(), 500, 1).unwrap()
    }

    fn request() -> SubmitRequest {
        SubmitRequest {
            queries: vec![
                Query::count("all", Filter::all()),
                Query::count(
                    "south",
                    Filter::all().and(Predicate::Eq { column: "region".into(), value: "south".into() }),
                ),
            ],
            specs: vec![AccuracySpec::new(5.0, 0.05).unwrap(); 2],
            justification: "Tax credit uptake by region.".into(),
            planned_outputs: "One table.".into(),
        }
    }

    struct Fixture {
        wf: Workflow,
        emily: Actor,
        reviewer: Actor,
        project: ProjectId,
    }

    fn fixture() -> Fixture {
        let ledger = Arc::new(Ledger::in_memory());
        let project = ledger.open_project("emily", "CTC", &"ctc".into()).unwrap().project_id;
        Fixture {
            wf: Workflow::in_memory(ledger, WorkflowSettings::default()),
            emily: Actor::new("emily", Role::Researcher),
            reviewer: Actor::new("rita", Role::Reviewer),
            project,
        }
    }

    #[test]
    fn submit_validation_and_authorization() {
        let f = fixture();
        let mut r = request();
        r.justification = " ".into();
        assert!(matches!(f.wf.submit(&f.emily, &f.project, r, &schema()), Err(WorkflowError::Validation(_))));
        let mut r = request();
        r.queries[0] = Query::new("m", QueryKind::Mean { column: "region".into(), filter: Filter::all() });
        assert!(matches!(f.wf.submit(&f.emily, &f.project, r, &schema()), Err(WorkflowError::Validation(_))));
        assert!(matches!(
            f.wf.submit(&f.reviewer, &f.project, request(), &schema()),
            Err(WorkflowError::Forbidden(_))
        ));
        let other = Actor::new("mallory", Role::Researcher);
        assert!(matches!(f.wf.submit(&other, &f.project, request(), &schema()), Err(WorkflowError::Forbidden(_))));
        let p = f.wf.submit(&f.emily, &f.project, request(), &schema()).unwrap();
        assert_eq!((p.state, p.revision), (ProposalState::Submitted, 1));
        assert_eq!(super::super::replay_history(&p.history).unwrap(), ProposalState::Submitted);
    }

    #[test]
    fn report_totals_findings_and_containment() {
        let f = fixture();
        let p = f.wf.submit(&f.emily, &f.project, request(), &schema()).unwrap();
        let report = f.wf.compile_report(&p.proposal_id, &confidential(), &synthetic()).unwrap();
        let eps = (20.0f64).ln() / 5.0;
        assert!((report.total_epsilon - 2.0 * eps).abs() < 1e-12);
        assert!((report.total_epsilon - 1.1982).abs() < 1e-4);
        assert!(report.advisory_exceeded);
        let codes: Vec<_> = report.findings().map(|(q, f)| (q.as_str().to_string(), f.code)).collect();
        assert_eq!(codes, vec![("south".to_string(), FindingCode::EmptySubset)]);
        assert!(matches!(f.wf.report(&f.emily, &p.proposal_id), Err(WorkflowError::Forbidden(_))));
        let visible = serde_json::to_string(&f.wf.proposal(&p.proposal_id).unwrap()).unwrap();
        assert!(!visible.contains("DRYRUN") && !visible.contains("no confidential records"));
    }

    #[test]
    fn adjust_accept_approve_execute() {
        let f = fixture();
        let conf = confidential();
        let syn = synthetic();
        let p = f.wf.submit(&f.emily, &f.project, request(), &schema()).unwrap();
        let report = f.wf.compile_report(&p.proposal_id, &conf, &syn).unwrap();
        let before: Vec<f64> = report.rows.iter().map(|r| r.translation.epsilon().unwrap().epsilon()).collect();

        let tighten = Decision::adjust(vec![AccuracySpec::new(2.0, 0.05).unwrap(), p.specs[1]], None);
        assert_eq!(
            f.wf.decide(&f.reviewer, &p.proposal_id, tighten, &syn, None).unwrap_err(),
            WorkflowError::Validation("tightening not allowed".into())
        );
        assert!(matches!(
            f.wf.decide(&f.emily, &p.proposal_id, Decision::approve(), &syn, None),
            Err(WorkflowError::Forbidden(_))
        ));
        assert!(matches!(
            f.wf.decide(&f.reviewer, &p.proposal_id, Decision::approve(), &syn, Some(99)),
            Err(WorkflowError::Conflict { .. })
        ));
        let relax = Decision::adjust(vec![AccuracySpec::new(10.0, 0.05).unwrap(), p.specs[1]], Some("looser".into()));
        let p2 = f.wf.decide(&f.reviewer, &p.proposal_id, relax, &syn, None).unwrap();
        assert_eq!(p2.state, ProposalState::ChangesRequested);
        let preview = f.wf.report(&f.reviewer, &p.proposal_id).unwrap().adjustment_preview.unwrap();
        assert!((preview[0].translation.epsilon().unwrap().epsilon() - 0.2996).abs() < 1e-4);

        let p3 = f.wf.respond_adjustment(&f.emily, &p.proposal_id, true).unwrap();
        assert_eq!((p3.state, p3.revision), (ProposalState::Submitted, 2));
        assert_eq!(p3.specs[0].alpha, 10.0);
        let report = f.wf.compile_report(&p.proposal_id, &conf, &syn).unwrap();
        for (row, old) in report.rows.iter().zip(&before) {
            assert!(row.translation.epsilon().unwrap().epsilon() <= *old);
        }
        assert_eq!(f.wf.ledger().total_spent(&f.project).unwrap(), 0.0);
        f.wf.decide(&f.reviewer, &p.proposal_id, Decision::approve(), &syn, None).unwrap();
        assert_eq!(f.wf.ledger().total_spent(&f.project).unwrap(), 0.0);

        let researcher_exec = f.wf.execute(&f.emily, &p.proposal_id, &conf, &mut RandomSource::seeded(1));
        assert!(matches!(researcher_exec, Err(WorkflowError::Forbidden(_))));
        let release = f.wf.execute(&f.reviewer, &p.proposal_id, &conf, &mut RandomSource::seeded(1)).unwrap();
        assert_eq!(release.queries.len(), 2);
        let spent = f.wf.ledger().total_spent(&f.project).unwrap();
        assert!((spent - report.total_epsilon).abs() < 1e-12);
        assert_eq!(f.wf.proposal(&p.proposal_id).unwrap().state, ProposalState::Released);
        let again = f.wf.execute(&f.reviewer, &p.proposal_id, &conf, &mut RandomSource::seeded(1));
        assert!(matches!(again, Err(WorkflowError::IllegalTransition { .. })));
        // commit precedes release
        let commit_time = f.wf.ledger().entries().iter().filter(|e| e.phase == Phase::Committed).map(|e| e.timestamp).max().unwrap();
        assert!(release.released_at >= commit_time);
    }

    #[test]
    fn decline_withdraws_without_spend() {
        let f = fixture();
        let syn = synthetic();
        let p = f.wf.submit(&f.emily, &f.project, request(), &schema()).unwrap();
        f.wf.compile_report(&p.proposal_id, &confidential(), &syn).unwrap();
        let relax = Decision::adjust(vec![AccuracySpec::new(10.0, 0.05).unwrap(), p.specs[1]], None);
        f.wf.decide(&f.reviewer, &p.proposal_id, relax, &syn, None).unwrap();
        assert!(matches!(
            f.wf.respond_adjustment(&Actor::new("mallory", Role::Researcher), &p.proposal_id, false),
            Err(WorkflowError::Forbidden(_))
        ));
        let w = f.wf.respond_adjustment(&f.emily, &p.proposal_id, false).unwrap();
        assert_eq!(w.state, ProposalState::Withdrawn);
        assert!(f.wf.ledger().entries().is_empty());
        assert!(matches!(
            f.wf.respond_adjustment(&f.emily, &p.proposal_id, true),
            Err(WorkflowError::IllegalTransition { .. })
        ));
    }

    #[test]
    fn rejected_cannot_execute() {
        let f = fixture();
        let syn = synthetic();
        let p = f.wf.submit(&f.emily, &f.project, request(), &schema()).unwrap();
        f.wf.compile_report(&p.proposal_id, &confidential(), &syn).unwrap();
        f.wf.decide(&f.reviewer, &p.proposal_id, Decision::reject("out of scope"), &syn, None).unwrap();
        let r = f.wf.execute(&f.reviewer, &p.proposal_id, &confidential(), &mut RandomSource::seeded(1));
        assert!(matches!(r, Err(WorkflowError::IllegalTransition { .. })));
        assert!(f.wf.ledger().entries().is_empty());
        assert_eq!(f.wf.ledger().global_report().proposals_rejected, 1);
    }

    #[test]
    fn mechanism_failure_voids_and_allows_retry() {
        let f = fixture();
        let syn = synthetic();
        let conf = confidential();
        let p = f.wf.submit(&f.emily, &f.project, request(), &schema()).unwrap();
        f.wf.compile_report(&p.proposal_id, &conf, &syn).unwrap();
        f.wf.decide(&f.reviewer, &p.proposal_id, Decision::approve(), &syn, None).unwrap();
        let r = f.wf.execute_with(&f.reviewer, &p.proposal_id, &conf, &mut RandomSource::seeded(1), Some(CrashPoint::MechanismFailure));
        assert!(matches!(r, Err(WorkflowError::Execution(_))));
        assert_eq!(f.wf.proposal(&p.proposal_id).unwrap().state, ProposalState::Approved);
        assert_eq!(f.wf.ledger().total_spent(&f.project).unwrap(), 0.0);
        f.wf.execute(&Actor::new("root", Role::Admin), &p.proposal_id, &conf, &mut RandomSource::seeded(1)).unwrap();
        assert!(f.wf.ledger().total_spent(&f.project).unwrap() > 0.0);
    }

    #[test]
    fn crash_then_recover_from_disk() {
        for point in CrashPoint::ALL {
            let dir = tempfile::tempdir().unwrap();
            let conf = confidential();
            let syn = synthetic();
            let reviewer = Actor::new("rita", Role::Reviewer);
            let (project, pid, expected) = {
                let ledger = Arc::new(Ledger::open(&dir.path().join("ledger")).unwrap());
                let project = ledger.open_project("emily", "CTC", &"ctc".into()).unwrap().project_id;
                let (wf, _) = Workflow::open(dir.path(), ledger, WorkflowSettings::default()).unwrap();
                let p = wf.submit(&Actor::new("emily", Role::Researcher), &project, request(), &schema()).unwrap();
                let report = wf.compile_report(&p.proposal_id, &conf, &syn).unwrap();
                wf.decide(&reviewer, &p.proposal_id, Decision::approve(), &syn, None).unwrap();
                let r = wf.execute_with(&reviewer, &p.proposal_id, &conf, &mut RandomSource::seeded(3), Some(point));
                assert!(r.is_err(), "{point:?}");
                (project, p.proposal_id, report.total_epsilon)
            };
            let ledger = Arc::new(Ledger::open(&dir.path().join("ledger")).unwrap());
            let (wf, _) = Workflow::open(dir.path(), ledger.clone(), WorkflowSettings::default()).unwrap();
            crate::ledger::verify_file(&dir.path().join("ledger").join(crate::ledger::LEDGER_FILE)).unwrap();
            assert!(ledger.open_reservations("").is_empty());
            let state = wf.proposal(&pid).unwrap().state;
            match state {
                ProposalState::Approved => {
                    assert_eq!(ledger.total_spent(&project).unwrap(), 0.0, "{point:?}");
                    wf.execute(&reviewer, &pid, &conf, &mut RandomSource::seeded(4)).unwrap();
                }
                ProposalState::Released => {}
                other => panic!("{point:?} left {other:?}"),
            }
            assert_eq!(wf.proposal(&pid).unwrap().state, ProposalState::Released);
            assert!(wf.release(&pid).is_some());
            assert!((ledger.total_spent(&project).unwrap() - expected).abs() < 1e-12, "{point:?}");
            super::super::replay_history(&wf.proposal(&pid).unwrap().history).unwrap();
        }
    }
}
