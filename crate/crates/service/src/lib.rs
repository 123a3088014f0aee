//! JSON-over-HTTP facade for checkpoint selection with clarification
//! sessions, registry browsing, TAQ demos, sensitivity probes and budget
//! planning. All routes live under `/v1`.

mod error;
mod reranker;
mod sessions;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use trigserve::attention::{
    forward_reference, forward_reference_projected, forward_taq, forward_taq_projected,
    AttentionBundle,
};
use trigserve::budget::{
    budget_report, flops_from_bops32, plan_serving, BudgetReport, ServingItem, ServingPlan,
    DEFAULT_CHECKPOINT_BYTES, SD15_BOPS_32,
};
use trigserve::numerics::{mse, Matrix};
use trigserve::quantizers::{QuantKind, QuantSpec};
use trigserve::registry::{CheckpointRecord, Repository, SharedRepository, Snapshot};
use trigserve::selection::{
    IntentRecord, RerankClient, RerankerChoice, SelectionConfig, SelectionOutcome, SelectionState,
    SelectionStatus, SystemContext,
};
use trigserve::sensitivity::{probe_all_with, SensitivityReport, SpanMode};

pub use error::{ApiError, ErrorBody};
pub use reranker::HttpRerankClient;
use sessions::{Session, SessionStore};

pub const DEFAULT_SESSION_TTL: Duration = Duration::from_secs(600);
pub const DEFAULT_PAGE_SIZE: usize = 100;
const MAX_PAGE_SIZE: usize = 1000;

pub struct ServiceConfig {
    pub session_ttl: Duration,
    pub reranker: Option<Arc<dyn RerankClient>>,
    pub selection: SelectionConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            session_ttl: DEFAULT_SESSION_TTL,
            reranker: None,
            selection: SelectionConfig::default(),
        }
    }
}

struct Inner {
    repo: SharedRepository,
    sessions: SessionStore,
    reranker: Option<Arc<dyn RerankClient>>,
    selection: SelectionConfig,
}

/// Shared handle to the service state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(repo: Option<Repository>, config: ServiceConfig) -> Self {
        AppState {
            inner: Arc::new(Inner {
                repo: SharedRepository::new(repo),
                sessions: SessionStore::new(config.session_ttl),
                reranker: config.reranker,
                selection: config.selection,
            }),
        }
    }

    /// Publishes a new repository snapshot and returns its generation.
    /// Requests already running keep the snapshot they started with.
    pub fn publish(&self, repo: Repository) -> u64 {
        self.inner.repo.publish(repo).generation
    }

    pub fn snapshot(&self) -> Option<Snapshot> {
        self.inner.repo.snapshot()
    }

    pub fn open_sessions(&self) -> usize {
        self.inner.sessions.len()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/select", post(select))
        .route("/v1/select/{session_id}/answer", post(answer))
        .route("/v1/checkpoints", get(list_checkpoints))
        .route("/v1/checkpoints/{id}", get(get_checkpoint))
        .route("/v1/taq/forward", post(taq_forward))
        .route("/v1/taq/probe", post(taq_probe))
        .route("/v1/budget", post(budget))
        .with_state(state)
}

/// Serves the router on `listener` until the process exits.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let mut err = ApiError::bad_request(e.inner().to_string());
        err.body.path = Some(path);
        err
    })
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn current(state: &AppState) -> Result<Snapshot, ApiError> {
    state
        .inner
        .repo
        .snapshot()
        .ok_or_else(ApiError::no_repository)
}

// ---------------------------------------------------------------------------
// selection

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankerMode {
    #[default]
    RuleBased,
    External,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Defaults {
    quant_preset: Option<QuantSpec>,
    memory_budget_bytes: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectRequest {
    prompt: String,
    #[serde(default)]
    defaults: Option<Defaults>,
    #[serde(default)]
    reranker: RerankerMode,
    /// Restricts retrieval to these checkpoint ids.
    #[serde(default)]
    pool: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnswerRequest {
    option: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectResponse {
    #[serde(flatten)]
    pub outcome: SelectionOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    pub turn_count: u32,
    pub snapshot_generation: u64,
    pub intent: IntentRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant_preset: Option<QuantSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<BudgetReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fits_memory_budget: Option<bool>,
}

fn reranker_choice<'a>(
    state: &'a AppState,
    mode: RerankerMode,
) -> Result<RerankerChoice<'a>, ApiError> {
    match mode {
        RerankerMode::RuleBased => Ok(RerankerChoice::RuleBased),
        RerankerMode::External => state
            .inner
            .reranker
            .as_deref()
            .map(RerankerChoice::External)
            .ok_or_else(|| {
                ApiError::bad_request(
                    "external reranker not configured (start with --reranker-url)",
                )
            }),
    }
}

fn respond(
    outcome: SelectionOutcome,
    selection: &SelectionState,
    snapshot: &Snapshot,
    session_id: Option<String>,
    turn_count: u32,
) -> Result<SelectResponse, ApiError> {
    let ctx = selection.intent.system_context;
    let mut resp = SelectResponse {
        outcome,
        session_id,
        turn_count,
        snapshot_generation: snapshot.generation,
        intent: selection.intent.clone(),
        quant_preset: None,
        budget: None,
        fits_memory_budget: None,
    };
    if let Some(id) = &resp.outcome.selected_id {
        let record = snapshot.repo.get(id)?;
        let preset = ctx.quant_preset;
        let report = budget_report(
            flops_from_bops32(SD15_BOPS_32),
            preset.weight_bits,
            preset.activation_bits,
            record.weight_bytes,
            0,
        )?;
        resp.fits_memory_budget = Some(report.memory_bytes_quant <= ctx.memory_budget_bytes);
        resp.quant_preset = Some(preset);
        resp.budget = Some(report);
    }
    Ok(resp)
}

async fn select(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<Json<SelectResponse>, ApiError> {
    let req: SelectRequest = parse(&body)?;
    if req.prompt.trim().is_empty() {
        let mut err = ApiError::bad_request("prompt must not be empty");
        err.body.path = Some("prompt".into());
        return Err(err);
    }
    let snapshot = current(&state)?;
    let mut ctx = SystemContext::default();
    if let Some(d) = req.defaults {
        if let Some(p) = d.quant_preset {
            ctx.quant_preset = p;
        }
        if let Some(b) = d.memory_budget_bytes {
            ctx.memory_budget_bytes = b;
        }
    }
    reranker_choice(&state, req.reranker)?;

    let worker_state = state.clone();
    let snap = snapshot.clone();
    let (selection, outcome) = blocking(move || {
        let config = worker_state.inner.selection;
        let mut sel =
            SelectionState::start(&req.prompt, &snap.repo, req.pool.as_deref(), &ctx, &config)?;
        let choice = reranker_choice(&worker_state, req.reranker)?;
        let outcome = sel.evaluate(&snap.repo, &config, choice)?;
        Ok((sel, outcome))
    })
    .await?;

    tracing::debug!(status = ?outcome.status, generation = snapshot.generation, "select");
    let session_id = (outcome.status == SelectionStatus::NeedsClarification).then(|| {
        state.inner.sessions.insert(Session {
            state: selection.clone(),
            snapshot: snapshot.clone(),
            reranker: req.reranker,
            turn_count: 1,
            expires_at: Instant::now() + state.inner.sessions.ttl(),
            closed: false,
        })
    });
    Ok(Json(respond(
        outcome, &selection, &snapshot, session_id, 1,
    )?))
}

async fn answer(
    State(state): State<AppState>,
    Path(session_id): Path<String>,
    body: Bytes,
) -> Result<Json<SelectResponse>, ApiError> {
    let req: AnswerRequest = parse(&body)?;
    let gone = || ApiError::not_found(format!("no open session {session_id}"));
    let handle = state.inner.sessions.get(&session_id).ok_or_else(gone)?;
    let mut session = handle.lock_owned().await;
    if session.closed || session.expires_at <= Instant::now() {
        state.inner.sessions.remove(&session_id);
        return Err(gone());
    }

    let worker_state = state.clone();
    let mut selection = session.state.clone();
    let snapshot = session.snapshot.clone();
    let mode = session.reranker;
    let (selection, outcome) = blocking(move || {
        let config = worker_state.inner.selection;
        let choice = reranker_choice(&worker_state, mode)?;
        let outcome = selection.apply_answer(&req.option, &snapshot.repo, &config, choice)?;
        Ok((selection, outcome))
    })
    .await?;

    tracing::debug!(%session_id, status = ?outcome.status, "answer");
    session.turn_count += 1;
    session.expires_at = Instant::now() + state.inner.sessions.ttl();
    session.state = selection.clone();
    let terminal = outcome.status != SelectionStatus::NeedsClarification;
    if terminal {
        session.closed = true;
        state.inner.sessions.remove(&session_id);
    }
    let id = (!terminal).then(|| session_id.clone());
    Ok(Json(respond(
        outcome,
        &selection,
        &session.snapshot,
        id,
        session.turn_count,
    )?))
}

// ---------------------------------------------------------------------------
// registry views

/// A record without its embedding, as listed in pages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub id: String,
    pub triggers: Vec<String>,
    pub subjects: Vec<String>,
    pub styles: Vec<String>,
    pub description: String,
    pub created_at: DateTime<Utc>,
    pub version: u32,
    pub weight_bytes: u64,
}

impl From<&CheckpointRecord> for CheckpointSummary {
    fn from(r: &CheckpointRecord) -> Self {
        CheckpointSummary {
            id: r.id.clone(),
            triggers: r.triggers.clone(),
            subjects: r.subjects.clone(),
            styles: r.styles.clone(),
            description: r.description.clone(),
            created_at: r.created_at,
            version: r.version,
            weight_bytes: r.weight_bytes,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointPage {
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
    pub pages: usize,
    pub snapshot_generation: u64,
    pub items: Vec<CheckpointSummary>,
}

fn query_number(
    params: &HashMap<String, String>,
    key: &str,
    default: usize,
) -> Result<usize, ApiError> {
    match params.get(key) {
        None => Ok(default),
        Some(raw) => raw.parse().map_err(|_| {
            let mut err =
                ApiError::bad_request(format!("{key} must be a positive integer, got {raw:?}"));
            err.body.path = Some(key.to_string());
            err
        }),
    }
}

async fn list_checkpoints(
    State(state): State<AppState>,
    Query(params): Query<HashMap<String, String>>,
) -> Result<Json<CheckpointPage>, ApiError> {
    let snapshot = current(&state)?;
    let page = query_number(&params, "page", 1)?;
    let page_size = query_number(&params, "page_size", DEFAULT_PAGE_SIZE)?;
    if page == 0 || page_size == 0 || page_size > MAX_PAGE_SIZE {
        return Err(ApiError::bad_request(format!(
            "page must be >= 1 and page_size in 1..={MAX_PAGE_SIZE}"
        )));
    }
    let matches = |values: &[String], wanted: Option<&String>| {
        wanted.is_none_or(|w| values.iter().any(|v| v.eq_ignore_ascii_case(w.trim())))
    };
    let filtered: Vec<&CheckpointRecord> = snapshot
        .repo
        .records()
        .filter(|r| {
            matches(&r.subjects, params.get("subject")) && matches(&r.styles, params.get("style"))
        })
        .collect();
    let total = filtered.len();
    let items = filtered
        .into_iter()
        .skip((page - 1) * page_size)
        .take(page_size)
        .map(CheckpointSummary::from)
        .collect();
    Ok(Json(CheckpointPage {
        total,
        page,
        page_size,
        pages: total.div_ceil(page_size),
        snapshot_generation: snapshot.generation,
        items,
    }))
}

async fn get_checkpoint(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<CheckpointRecord>, ApiError> {
    let snapshot = current(&state)?;
    Ok(Json(snapshot.repo.get(&id)?.clone()))
}

// ---------------------------------------------------------------------------
// quantization and budget

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ForwardRequest {
    bundle: AttentionBundle,
    #[serde(default)]
    spec: QuantSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForwardSummary {
    pub spec: QuantSpec,
    pub y: Matrix,
    pub mse_vs_reference: f64,
    pub row_sum_deviation: f64,
}

async fn taq_forward(body: Bytes) -> Result<Json<ForwardSummary>, ApiError> {
    let req: ForwardRequest = parse(&body)?;
    req.spec.validate()?;
    blocking(move || {
        let (out, reference) = if req.bundle.projections.is_some() {
            (
                forward_taq_projected(&req.bundle, &req.spec)?,
                forward_reference_projected(&req.bundle)?,
            )
        } else {
            (
                forward_taq(&req.bundle, &req.spec)?,
                forward_reference(&req.bundle)?,
            )
        };
        Ok(Json(ForwardSummary {
            spec: req.spec,
            mse_vs_reference: mse(&out.y, &reference.y)?,
            row_sum_deviation: out.row_sum_deviation,
            y: out.y,
        }))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeRequest {
    bundle: AttentionBundle,
    bits: u32,
    #[serde(default)]
    kind: QuantKind,
    #[serde(default)]
    span_mode: SpanMode,
}

async fn taq_probe(body: Bytes) -> Result<Json<SensitivityReport>, ApiError> {
    let req: ProbeRequest = parse(&body)?;
    blocking(move || {
        Ok(Json(probe_all_with(
            &req.bundle,
            req.bits,
            req.kind,
            req.span_mode,
            Default::default(),
        )?))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BudgetRequest {
    /// Floating-point operations per generation.
    flops: Option<f64>,
    /// Alternatively, the 32/32 bit-operation count.
    bops32: Option<f64>,
    record_ids: Option<Vec<String>>,
    weight_bytes: Option<u64>,
    #[serde(default)]
    trigger_overhead_bytes: u64,
    w_bits: u32,
    a_bits: u32,
    /// With `record_ids`, plan co-loading them under this budget.
    budget_bytes: Option<u64>,
    presets: Option<Vec<QuantSpec>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetResponse {
    #[serde(flatten)]
    pub report: BudgetReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<ServingPlan>,
}

async fn budget(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<Json<BudgetResponse>, ApiError> {
    let req: BudgetRequest = parse(&body)?;
    let flops = match (req.flops, req.bops32) {
        (Some(_), Some(_)) => {
            return Err(ApiError::bad_request(
                "give either flops or bops32, not both",
            ))
        }
        (Some(f), None) => f,
        (None, Some(b)) => flops_from_bops32(b),
        (None, None) => flops_from_bops32(SD15_BOPS_32),
    };
    let mut plan = None;
    let weight_bytes = match &req.record_ids {
        Some(ids) => {
            let snapshot = current(&state)?;
            let items: Vec<ServingItem> = ids
                .iter()
                .map(|id| snapshot.repo.get(id).map(ServingItem::from))
                .collect::<Result<_, _>>()?;
            if let Some(budget_bytes) = req.budget_bytes {
                let presets = match req.presets {
                    Some(p) => p,
                    None => vec![
                        QuantSpec::preset(req.w_bits, req.a_bits)?,
                        QuantSpec::preset(4, 4)?,
                    ],
                };
                plan = Some(plan_serving(&items, budget_bytes, &presets)?);
            }
            items.iter().map(|i| i.weight_bytes).sum()
        }
        None => req.weight_bytes.unwrap_or(DEFAULT_CHECKPOINT_BYTES),
    };
    let report = budget_report(
        flops,
        req.w_bits,
        req.a_bits,
        weight_bytes,
        req.trigger_overhead_bytes,
    )?;
    Ok(Json(BudgetResponse { report, plan }))
}
