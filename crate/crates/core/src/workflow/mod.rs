//! Proposal lifecycle: submission, reviewer report with a confidential dry
//! run, decisions (approve, reject, adjust accuracy) and gated execution.
//!
//! Dry-run findings live only in the [`ReviewReport`], which is a reviewer
//! document. Nothing researcher-facing ([`Proposal`], releases, previews)
//! carries them.

mod engine;

pub use engine::{CrashPoint, RecoveryReport, SubmitRequest, Workflow, WorkflowSettings};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Query, StatisticKind};
use crate::ids::{DatasetId, ProjectId, ProposalId, QueryId};
use crate::ledger::LedgerError;
use crate::mechanisms::MechanismError;
use crate::translation::{AccuracySpec, Translation, TranslationError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Researcher,
    Reviewer,
    Admin,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Actor {
    pub id: String,
    pub role: Role,
}

impl Actor {
    pub fn new(id: impl Into<String>, role: Role) -> Self {
        Actor { id: id.into(), role }
    }

    pub fn system() -> Self {
        Actor { id: "system".into(), role: Role::Admin }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalState {
    Draft,
    Submitted,
    UnderReview,
    ChangesRequested,
    Approved,
    Rejected,
    Executed,
    Released,
    Withdrawn,
}

impl ProposalState {
    pub fn can_transition(self, to: ProposalState) -> bool {
        use ProposalState::*;
        matches!(
            (self, to),
            (Draft, Submitted)
                | (Submitted, UnderReview)
                | (UnderReview, Approved)
                | (UnderReview, Rejected)
                | (UnderReview, ChangesRequested)
                | (ChangesRequested, Submitted)
                | (ChangesRequested, Withdrawn)
                | (Approved, Executed)
                | (Executed, Released)
        )
    }

    pub fn as_str(self) -> &'static str {
        use ProposalState::*;
        match self {
            Draft => "draft",
            Submitted => "submitted",
            UnderReview => "under_review",
            ChangesRequested => "changes_requested",
            Approved => "approved",
            Rejected => "rejected",
            Executed => "executed",
            Released => "released",
            Withdrawn => "withdrawn",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, ProposalState::Rejected | ProposalState::Released | ProposalState::Withdrawn)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub from: Option<ProposalState>,
    pub to: ProposalState,
    pub actor: String,
    pub role: Role,
    pub at: DateTime<Utc>,
    pub revision: u32,
    #[serde(default)]
    pub note: Option<String>,
}

/// Specs of an earlier revision, kept when an adjustment is accepted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevisionSnapshot {
    pub revision: u32,
    pub specs: Vec<AccuracySpec>,
}

/// A research proposal. This is the researcher-visible record: it holds no
/// dry-run findings and no privacy-loss parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub proposal_id: ProposalId,
    pub project_id: ProjectId,
    pub dataset_id: DatasetId,
    pub researcher: String,
    pub revision: u32,
    pub queries: Vec<Query>,
    pub specs: Vec<AccuracySpec>,
    pub justification: String,
    pub planned_outputs: String,
    pub state: ProposalState,
    /// Bumped on every transition; used for compare-and-set.
    pub version: u64,
    pub history: Vec<Transition>,
    /// Reviewer's relaxed specs while in `ChangesRequested`.
    pub adjusted_specs: Option<Vec<AccuracySpec>>,
    pub reviewer_note: Option<String>,
    pub previous_revisions: Vec<RevisionSnapshot>,
}

/// Checks that a recorded history starts at Draft and only makes legal moves.
pub fn replay_history(history: &[Transition]) -> Result<ProposalState, WorkflowError> {
    let mut iter = history.iter();
    let first = iter.next().ok_or_else(|| WorkflowError::Validation("empty history".into()))?;
    if first.from.is_some() || first.to != ProposalState::Draft {
        return Err(WorkflowError::Validation("history must start at draft".into()));
    }
    let mut state = ProposalState::Draft;
    for t in iter {
        if t.from != Some(state) || !state.can_transition(t.to) {
            return Err(WorkflowError::IllegalTransition { from: state, to: t.to });
        }
        state = t.to;
    }
    Ok(state)
}

/// What the confidential dry run found. Reviewer-only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FindingCode {
    #[serde(rename = "DRYRUN_EMPTY_SUBSET")]
    EmptySubset,
    #[serde(rename = "DRYRUN_DEGENERATE_DENOMINATOR")]
    DegenerateDenominator,
    #[serde(rename = "DRYRUN_RANK_DEFICIENT")]
    RankDeficient,
}

impl FindingCode {
    pub fn as_str(self) -> &'static str {
        match self {
            FindingCode::EmptySubset => "DRYRUN_EMPTY_SUBSET",
            FindingCode::DegenerateDenominator => "DRYRUN_DEGENERATE_DENOMINATOR",
            FindingCode::RankDeficient => "DRYRUN_RANK_DEFICIENT",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DryRunFinding {
    pub code: FindingCode,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub query_id: QueryId,
    pub statistic: StatisticKind,
    pub spec: AccuracySpec,
    pub translation: Translation,
    pub findings: Vec<DryRunFinding>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentRow {
    pub query_id: QueryId,
    pub spec: AccuracySpec,
    pub translation: Translation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordedDecision {
    pub decision: Decision,
    pub reviewer: String,
    pub at: DateTime<Utc>,
}

/// Reviewer document. Never serialized into a researcher-visible payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewReport {
    pub proposal: Proposal,
    pub compiled_at: DateTime<Utc>,
    pub rows: Vec<ReportRow>,
    /// Sum of the per-query ε over feasible queries.
    pub total_epsilon: f64,
    pub infeasible_queries: Vec<QueryId>,
    /// Committed ε of the project before this proposal.
    pub project_spent: f64,
    pub advisory_threshold: Option<f64>,
    /// Project total after this proposal would exceed the advisory threshold.
    pub advisory_exceeded: bool,
    pub adjustment_preview: Option<Vec<AdjustmentRow>>,
    pub decision: Option<RecordedDecision>,
}

impl ReviewReport {
    pub fn findings(&self) -> impl Iterator<Item = (&QueryId, &DryRunFinding)> {
        self.rows.iter().flat_map(|r| r.findings.iter().map(move |f| (&r.query_id, f)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecisionKind {
    Approve,
    Reject,
    /// Full list of specs, one per query, each equal to or looser than before.
    Adjust { specs: Vec<AccuracySpec> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    #[serde(flatten)]
    pub kind: DecisionKind,
    /// Free text, shown to the researcher.
    #[serde(default)]
    pub note: Option<String>,
}

impl Decision {
    pub fn approve() -> Self {
        Decision { kind: DecisionKind::Approve, note: None }
    }

    pub fn reject(note: impl Into<String>) -> Self {
        Decision { kind: DecisionKind::Reject, note: Some(note.into()) }
    }

    pub fn adjust(specs: Vec<AccuracySpec>, note: Option<String>) -> Self {
        Decision { kind: DecisionKind::Adjust { specs }, note }
    }
}

/// Relax-only rule: same length, at least one change, no alpha or beta lowered.
pub fn validate_adjustment(current: &[AccuracySpec], proposed: &[AccuracySpec]) -> Result<(), WorkflowError> {
    if current.len() != proposed.len() {
        return Err(WorkflowError::Validation(format!(
            "adjustment lists {} specs for {} queries",
            proposed.len(),
            current.len()
        )));
    }
    for s in proposed {
        s.validate().map_err(|e| WorkflowError::Validation(e.to_string()))?;
    }
    if current.iter().zip(proposed).any(|(old, new)| !new.relaxes(old)) {
        return Err(WorkflowError::Validation("tightening not allowed".into()));
    }
    if current == proposed {
        return Err(WorkflowError::Validation("adjustment must change at least one accuracy requirement".into()));
    }
    Ok(())
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkflowError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("not authorized: {0}")]
    Forbidden(String),
    #[error("unknown {kind} `{id}`")]
    NotFound { kind: &'static str, id: String },
    #[error("illegal transition from {} to {}", .from.as_str(), .to.as_str())]
    IllegalTransition { from: ProposalState, to: ProposalState },
    #[error("proposal changed concurrently (expected version {expected}, found {found})")]
    Conflict { expected: u64, found: u64 },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("execution failed: {0}")]
    Execution(String),
    #[error("storage error: {0}")]
    Io(String),
    /// Injected crash (tests only): the operation stopped without cleanup.
    #[error("simulated crash at {0:?}")]
    Crashed(CrashPoint),
}

impl From<DataError> for WorkflowError {
    fn from(e: DataError) -> Self {
        WorkflowError::Validation(e.to_string())
    }
}

impl From<TranslationError> for WorkflowError {
    fn from(e: TranslationError) -> Self {
        WorkflowError::Validation(e.to_string())
    }
}

impl From<MechanismError> for WorkflowError {
    fn from(e: MechanismError) -> Self {
        WorkflowError::Validation(e.to_string())
    }
}

impl From<std::io::Error> for WorkflowError {
    fn from(e: std::io::Error) -> Self {
        WorkflowError::Io(e.to_string())
    }
}
