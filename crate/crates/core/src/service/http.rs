use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::RwLock;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::store::{load_datasets, DatasetEntry};
use super::{Config, ServiceError};
use crate::data::{PublicDataset, Query};
use crate::ids::{DatasetId, ProjectId, ProposalId, QueryId};
use crate::ledger::{Ledger, LedgerError, Project};
use crate::mechanisms::NoiseDetail;
use crate::release::{render_release, results_csv, DisclosureConfig, Release};
use crate::rng::RandomSource;
use crate::synthetic::{run_preview, ProvenanceRecord};
use crate::translation::{preview_outputs, AccuracySpec, PreviewRow};
use crate::workflow::{Actor, Decision, DecisionKind, Proposal, Role, SubmitRequest, Workflow, WorkflowError, WorkflowSettings};

pub const SCHEMA_VERSION: u32 = 1;

/// Every JSON response: `{"schema_version": 1, "data": ...}` or
/// `{"schema_version": 1, "error": {"code": ..., "message": ...}}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema_version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

pub struct AppState {
    config: Config,
    datasets: RwLock<BTreeMap<DatasetId, DatasetEntry>>,
    workflow: Arc<Workflow>,
    tokens: HashMap<String, Actor>,
}

impl AppState {
    /// Datasets with both a confidential and a synthetic side.
    pub fn dataset_count(&self) -> usize {
        self.datasets.read().values().filter(|d| d.synthetic.is_some()).count()
    }

    pub fn workflow(&self) -> &Arc<Workflow> {
        &self.workflow
    }

    /// Re-reads the dataset store (after CLI registration while running).
    pub fn reload_datasets(&self) -> Result<(), ServiceError> {
        *self.datasets.write() = load_datasets(&self.config.data_dir)?;
        Ok(())
    }
}

/// Opens the stores under the configured data directory (running crash
/// recovery) and builds the router.
pub fn build_app(config: Config) -> Result<(Router, Arc<AppState>), ServiceError> {
    config.validate()?;
    let dir = &config.data_dir;
    fs::create_dir_all(dir).map_err(|e| ServiceError::Io(format!("data directory {}: {e}", dir.display())))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"ok").map_err(|e| ServiceError::Io(format!("data directory {} not writable: {e}", dir.display())))?;
    let _ = fs::remove_file(&probe);

    let datasets = load_datasets(dir)?;
    let ledger = Arc::new(Ledger::open(&dir.join("ledger")).map_err(|e| ServiceError::Io(e.to_string()))?);
    let settings = WorkflowSettings {
        simulation: config.translation.clone(),
        mechanism: config.mechanism.clone(),
        disclosure: DisclosureConfig { disclose_epsilon: config.disclose_epsilon },
        advisory_thresholds: config.advisory_thresholds.clone(),
        default_advisory_threshold: config.default_advisory_threshold,
    };
    let (workflow, recovery) =
        Workflow::open(&dir.join("workflow"), ledger, settings).map_err(|e| ServiceError::Io(e.to_string()))?;
    if recovery.voided_reservations > 0 || !recovery.completed_releases.is_empty() {
        tracing::warn!(?recovery, "recovered from interrupted execution");
    }
    let tokens = config.tokens.iter().map(|t| (t.token.clone(), Actor::new(t.name.clone(), t.role))).collect();
    let state = Arc::new(AppState { config, datasets: RwLock::new(datasets), workflow: Arc::new(workflow), tokens });
    Ok((router(state.clone()), state))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/datasets", get(list_datasets))
        .route("/datasets/{id}/schema", get(dataset_schema))
        .route("/datasets/{id}/synthetic", get(dataset_synthetic))
        .route("/projects", post(create_project))
        .route("/projects/{id}", get(get_project))
        .route("/projects/{id}/queries/validate", post(validate_queries))
        .route("/projects/{id}/translate", post(translate_queries))
        .route("/projects/{id}/submit", post(submit))
        .route("/projects/{id}/respond-adjustment", post(respond_adjustment))
        .route("/projects/{id}/release", get(release_json))
        .route("/projects/{id}/release/methods.txt", get(release_methods))
        .route("/projects/{id}/release/results.csv", get(release_csv))
        .route("/review/queue", get(review_queue))
        .route("/review/{proposal}/report", get(review_report))
        .route("/review/{proposal}/decision", post(review_decision))
        .route("/review/{proposal}/execute", post(review_execute))
        .with_state(state)
}

type Shared = State<Arc<AppState>>;

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "validation", message)
    }

    fn forbidden(message: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, "forbidden", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Envelope::<()> {
            schema_version: SCHEMA_VERSION,
            data: None,
            error: Some(ErrorBody { code: self.code.to_string(), message: self.message }),
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<WorkflowError> for ApiError {
    fn from(e: WorkflowError) -> Self {
        let message = e.to_string();
        match e {
            WorkflowError::Validation(_) => ApiError::bad_request(message),
            WorkflowError::Forbidden(_) => ApiError::forbidden(message),
            WorkflowError::NotFound { .. } => ApiError::not_found(message),
            WorkflowError::IllegalTransition { .. } => ApiError::new(StatusCode::CONFLICT, "illegal_transition", message),
            WorkflowError::Conflict { .. } => ApiError::new(StatusCode::CONFLICT, "version_conflict", message),
            WorkflowError::Ledger(l) => l.into(),
            WorkflowError::Execution(_) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "execution_failed", message),
            WorkflowError::Io(_) | WorkflowError::Crashed(_) => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
            }
        }
    }
}

impl From<LedgerError> for ApiError {
    fn from(e: LedgerError) -> Self {
        let message = e.to_string();
        match e {
            LedgerError::NotFound(_) => ApiError::not_found(message),
            LedgerError::Validation(_) => ApiError::bad_request(message),
            LedgerError::DoubleCommit(_) | LedgerError::AlreadyReserved(_) | LedgerError::NotReserved(_) => {
                ApiError::new(StatusCode::CONFLICT, "double_execution", message)
            }
            LedgerError::ChainBroken { .. } | LedgerError::Io(_) => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "ledger", message)
            }
        }
    }
}

type ApiResult = Result<Response, ApiError>;

fn ok<T: Serialize>(status: StatusCode, data: T) -> ApiResult {
    Ok((status, Json(Envelope { schema_version: SCHEMA_VERSION, data: Some(data), error: None })).into_response())
}

fn text(content_type: &'static str, body: String) -> ApiResult {
    Ok(([(header::CONTENT_TYPE, content_type)], body).into_response())
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

fn authenticate(state: &AppState, headers: &HeaderMap) -> Result<Actor, ApiError> {
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthenticated", "missing bearer token"))?;
    state
        .tokens
        .get(token.trim())
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthenticated", "unknown token"))
}

fn require(actor: &Actor, roles: &[Role], what: &str) -> Result<(), ApiError> {
    if roles.contains(&actor.role) {
        Ok(())
    } else {
        Err(ApiError::forbidden(format!("role {:?} may not {what}", actor.role).to_lowercase()))
    }
}

/// Researchers see only their own projects; reviewers and admins see all.
fn project_for(state: &AppState, actor: &Actor, id: &str) -> Result<Project, ApiError> {
    let project = state.workflow.ledger().project(&ProjectId::new(id))?;
    if actor.role == Role::Researcher && project.researcher != actor.id {
        return Err(ApiError::forbidden("project belongs to another researcher"));
    }
    Ok(project)
}

fn synthetic_for(state: &AppState, dataset: &DatasetId) -> Result<PublicDataset, ApiError> {
    state
        .datasets
        .read()
        .get(dataset)
        .and_then(|d| d.synthetic.as_ref().map(|s| s.data().clone()))
        .ok_or_else(|| ApiError::not_found(format!("no synthetic data for dataset `{dataset}`")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn health() -> ApiResult {
    ok(StatusCode::OK, serde_json::json!({ "status": "ok" }))
}

#[derive(Serialize)]
struct DatasetSummary {
    dataset_id: DatasetId,
    columns: usize,
    synthetic: Option<ProvenanceRecord>,
}

async fn list_datasets(State(state): Shared, headers: HeaderMap) -> ApiResult {
    authenticate(&state, &headers)?;
    let list: Vec<DatasetSummary> = state
        .datasets
        .read()
        .values()
        .map(|d| DatasetSummary {
            dataset_id: d.schema.dataset_id.clone(),
            columns: d.schema.columns.len(),
            synthetic: d.synthetic.as_ref().map(|s| s.record().clone()),
        })
        .collect();
    ok(StatusCode::OK, list)
}

async fn dataset_schema(State(state): Shared, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    authenticate(&state, &headers)?;
    let schema = state
        .datasets
        .read()
        .get(&DatasetId::new(id.clone()))
        .map(|d| d.schema.clone())
        .ok_or_else(|| ApiError::not_found(format!("dataset `{id}`")))?;
    ok(StatusCode::OK, schema)
}

async fn dataset_synthetic(State(state): Shared, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    authenticate(&state, &headers)?;
    let data = synthetic_for(&state, &DatasetId::new(id))?;
    text("text/csv; charset=utf-8", data.to_csv())
}

#[derive(Deserialize)]
struct NewProject {
    title: String,
    dataset_id: DatasetId,
}

async fn create_project(State(state): Shared, headers: HeaderMap, body: Bytes) -> ApiResult {
    let actor = authenticate(&state, &headers)?;
    require(&actor, &[Role::Researcher], "open projects")?;
    let req: NewProject = parse(&body)?;
    if !state.datasets.read().contains_key(&req.dataset_id) {
        return Err(ApiError::not_found(format!("dataset `{}`", req.dataset_id)));
    }
    let project = state.workflow.ledger().open_project(&actor.id, &req.title, &req.dataset_id)?;
    ok(StatusCode::CREATED, project)
}

#[derive(Serialize)]
struct ProjectView {
    project: Project,
    proposals: Vec<Proposal>,
    /// Committed privacy-loss total; omitted when disclosure is off.
    #[serde(skip_serializing_if = "Option::is_none")]
    total_epsilon_spent: Option<f64>,
}

async fn get_project(State(state): Shared, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let actor = authenticate(&state, &headers)?;
    let project = project_for(&state, &actor, &id)?;
    let proposals = state.workflow.proposals_for_project(&project.project_id);
    let show = state.config.disclose_epsilon || actor.role != Role::Researcher;
    let total = if show { Some(state.workflow.ledger().total_spent(&project.project_id)?) } else { None };
    ok(StatusCode::OK, ProjectView { project, proposals, total_epsilon_spent: total })
}

#[derive(Deserialize)]
struct ValidateRequest {
    queries: Vec<Query>,
    #[serde(default)]
    specs: Option<Vec<AccuracySpec>>,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct QueryCheck {
    query_id: QueryId,
    valid: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic: Option<SyntheticAnswer>,
}

/// Exact answer on the synthetic data. Problems found here concern public
/// data only and are shown as-is.
#[derive(Serialize)]
struct SyntheticAnswer {
    labels: Vec<String>,
    values: Vec<f64>,
    notes: Vec<String>,
}

fn synthetic_notes(detail: &NoiseDetail, n: f64) -> Vec<String> {
    let mut notes = Vec::new();
    if n == 0.0 {
        notes.push("no synthetic records match this filter".to_string());
    }
    if let NoiseDetail::Ols { rank_deficient: true, .. } = detail {
        notes.push("predictors are collinear or constant in the synthetic data".to_string());
    }
    notes
}

async fn validate_queries(State(state): Shared, headers: HeaderMap, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let actor = authenticate(&state, &headers)?;
    let project = project_for(&state, &actor, &id)?;
    let req: ValidateRequest = parse(&body)?;
    let synthetic = synthetic_for(&state, &project.dataset_id)?;
    let config = state.config.mechanism.clone();
    let settings = state.config.translation.clone();
    let disclose = state.config.disclose_epsilon;
    let seed = req.seed.unwrap_or(0);
    let out = blocking(move || {
        let mut checks = Vec::with_capacity(req.queries.len());
        for q in &req.queries {
            match q.validate(synthetic.schema()) {
                Err(e) => checks.push(QueryCheck { query_id: q.query_id.clone(), valid: false, error: Some(e.to_string()), synthetic: None }),
                Ok(()) => {
                    let preview = run_preview(q, &synthetic, None, seed, &config).map_err(|e| ApiError::bad_request(e.to_string()))?;
                    let n = subset_size(q, &synthetic);
                    checks.push(QueryCheck {
                        query_id: q.query_id.clone(),
                        valid: true,
                        error: None,
                        synthetic: Some(SyntheticAnswer {
                            labels: preview.exact.estimate.labels,
                            values: preview.exact.estimate.values,
                            notes: synthetic_notes(&preview.exact.noise_model.detail, n),
                        }),
                    });
                }
            }
        }
        let preview = match (&req.specs, checks.iter().all(|c| c.valid)) {
            (Some(specs), true) => Some(
                preview_outputs(&req.queries, specs, &synthetic, seed, &settings, &config)
                    .map_err(|e| ApiError::bad_request(e.to_string()))?
                    .into_iter()
                    .map(|r| sanitize_row(r, disclose))
                    .collect::<Vec<_>>(),
            ),
            _ => None,
        };
        Ok(serde_json::json!({ "queries": checks, "preview": preview }))
    })
    .await?;
    ok(StatusCode::OK, out)
}

fn subset_size(q: &Query, data: &PublicDataset) -> f64 {
    crate::data::apply_filter(data, q.filter()).map_or(0.0, |d| d.len() as f64)
}

/// Drops privacy-loss numbers from a preview row when disclosure is off.
fn sanitize_row(mut row: PreviewRow, disclose: bool) -> PreviewRow {
    if !disclose {
        row.epsilon = None;
        if let Some(inf) = row.infeasible.as_mut() {
            inf.curve.clear();
        }
    }
    row
}

#[derive(Deserialize)]
struct TranslateRequest {
    queries: Vec<Query>,
    specs: Vec<AccuracySpec>,
    #[serde(default)]
    seed: Option<u64>,
}

async fn translate_queries(State(state): Shared, headers: HeaderMap, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let actor = authenticate(&state, &headers)?;
    let project = project_for(&state, &actor, &id)?;
    let req: TranslateRequest = parse(&body)?;
    let synthetic = synthetic_for(&state, &project.dataset_id)?;
    let config = state.config.mechanism.clone();
    let settings = state.config.translation.clone();
    let disclose = state.config.disclose_epsilon;
    let rows = blocking(move || {
        let seed = req.seed.unwrap_or(0);
        let rows = preview_outputs(&req.queries, &req.specs, &synthetic, seed, &settings, &config)
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        Ok(rows.into_iter().map(|r| sanitize_row(r, disclose)).collect::<Vec<_>>())
    })
    .await?;
    ok(StatusCode::OK, rows)
}

/// Files the reviewer report right after (re)submission.
fn compile(state: &AppState, proposal: &ProposalId, dataset: &DatasetId) -> Result<Proposal, ApiError> {
    let (confidential, synthetic) = {
        let datasets = state.datasets.read();
        let entry = datasets.get(dataset).ok_or_else(|| ApiError::not_found(format!("dataset `{dataset}`")))?;
        let synthetic = entry
            .synthetic
            .as_ref()
            .ok_or_else(|| ApiError::not_found(format!("no synthetic data for dataset `{dataset}`")))?;
        (entry.confidential.clone(), synthetic.data().clone())
    };
    state.workflow.compile_report(proposal, &confidential, &synthetic)?;
    Ok(state.workflow.proposal(proposal)?)
}

async fn submit(State(state): Shared, headers: HeaderMap, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let actor = authenticate(&state, &headers)?;
    require(&actor, &[Role::Researcher], "submit proposals")?;
    let project = project_for(&state, &actor, &id)?;
    let req: SubmitRequest = parse(&body)?;
    let schema = state
        .datasets
        .read()
        .get(&project.dataset_id)
        .map(|d| d.schema.clone())
        .ok_or_else(|| ApiError::not_found(format!("dataset `{}`", project.dataset_id)))?;
    let st = state.clone();
    let proposal = blocking(move || {
        let p = st.workflow.submit(&actor, &project.project_id, req, &schema)?;
        compile(&st, &p.proposal_id, &project.dataset_id)
    })
    .await?;
    ok(StatusCode::CREATED, proposal)
}

#[derive(Deserialize)]
struct AdjustmentResponse {
    proposal_id: ProposalId,
    accept: bool,
}

async fn respond_adjustment(State(state): Shared, headers: HeaderMap, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let actor = authenticate(&state, &headers)?;
    require(&actor, &[Role::Researcher], "respond to adjustments")?;
    let project = project_for(&state, &actor, &id)?;
    let req: AdjustmentResponse = parse(&body)?;
    if state.workflow.proposal(&req.proposal_id)?.project_id != project.project_id {
        return Err(ApiError::not_found(format!("proposal `{}` in project `{id}`", req.proposal_id)));
    }
    let st = state.clone();
    let proposal = blocking(move || {
        let p = st.workflow.respond_adjustment(&actor, &req.proposal_id, req.accept)?;
        if req.accept { compile(&st, &p.proposal_id, &project.dataset_id) } else { Ok(p) }
    })
    .await?;
    ok(StatusCode::OK, proposal)
}

async fn review_queue(State(state): Shared, headers: HeaderMap) -> ApiResult {
    let actor = authenticate(&state, &headers)?;
    require(&actor, &[Role::Reviewer, Role::Admin], "view the review queue")?;
    ok(StatusCode::OK, state.workflow.review_queue())
}

async fn review_report(State(state): Shared, headers: HeaderMap, Path(proposal): Path<String>) -> ApiResult {
    let actor = authenticate(&state, &headers)?;
    require(&actor, &[Role::Reviewer, Role::Admin], "view review reports")?;
    ok(StatusCode::OK, state.workflow.report(&actor, &ProposalId::new(proposal))?)
}

#[derive(Deserialize)]
struct DecisionRequest {
    #[serde(flatten)]
    decision: Decision,
    #[serde(default)]
    expected_version: Option<u64>,
}

#[derive(Serialize)]
struct DecisionOutcome {
    proposal: Proposal,
    #[serde(skip_serializing_if = "Option::is_none")]
    release: Option<Release>,
}

async fn review_decision(State(state): Shared, headers: HeaderMap, Path(proposal): Path<String>, body: Bytes) -> ApiResult {
    let actor = authenticate(&state, &headers)?;
    require(&actor, &[Role::Reviewer], "decide proposals")?;
    let req: DecisionRequest = parse(&body)?;
    let id = ProposalId::new(proposal);
    let current = state.workflow.proposal(&id)?;
    let synthetic = synthetic_for(&state, &current.dataset_id)?;
    let st = state.clone();
    let outcome = blocking(move || {
        let approve = matches!(req.decision.kind, DecisionKind::Approve);
        let p = st.workflow.decide(&actor, &id, req.decision, &synthetic, req.expected_version)?;
        let release = if approve && st.config.auto_execute { Some(execute(&st, &actor, &id)?) } else { None };
        let proposal = if release.is_some() { st.workflow.proposal(&id)? } else { p };
        Ok(DecisionOutcome { proposal, release })
    })
    .await?;
    ok(StatusCode::OK, outcome)
}

fn execute(state: &AppState, actor: &Actor, id: &ProposalId) -> Result<Release, ApiError> {
    let dataset = state.workflow.proposal(id)?.dataset_id;
    let confidential = state
        .datasets
        .read()
        .get(&dataset)
        .map(|d| d.confidential.clone())
        .ok_or_else(|| ApiError::not_found(format!("dataset `{dataset}`")))?;
    Ok(state.workflow.execute(actor, id, &confidential, &mut RandomSource::secure())?)
}

async fn review_execute(State(state): Shared, headers: HeaderMap, Path(proposal): Path<String>) -> ApiResult {
    let actor = authenticate(&state, &headers)?;
    require(&actor, &[Role::Reviewer, Role::Admin], "execute proposals")?;
    let id = ProposalId::new(proposal);
    let st = state.clone();
    let release = blocking(move || execute(&st, &actor, &id)).await?;
    ok(StatusCode::OK, release)
}

fn latest_release(state: &AppState, headers: &HeaderMap, id: &str) -> Result<Release, ApiError> {
    let actor = authenticate(state, headers)?;
    let project = project_for(state, &actor, id)?;
    state
        .workflow
        .latest_release(&project.project_id)
        .ok_or_else(|| ApiError::not_found(format!("no release for project `{id}`")))
}

async fn release_json(State(state): Shared, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let release = latest_release(&state, &headers, &id)?;
    ok(StatusCode::OK, serde_json::json!({ "release": release, "document": render_release(&release) }))
}

async fn release_methods(State(state): Shared, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let release = latest_release(&state, &headers, &id)?;
    text("text/plain; charset=utf-8", release.methods_text)
}

async fn release_csv(State(state): Shared, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let release = latest_release(&state, &headers, &id)?;
    text("text/csv; charset=utf-8", results_csv(&release))
}
