//! JSON-over-HTTP access to one loaded model and dataset for interactive
//! concept intervention.
//!
//! The model and dataset are shared read-only. All mutable state lives in
//! sessions, one per example being edited, each guarded by its own lock.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use cbm_core::data::{ConceptSchema, Dataset, Split, Task};
use cbm_core::intervention::{
    expand_groups, InterventionState, InterventionTrace, LogitPercentiles, OracleEntry, Target, TraceStep,
};
use cbm_core::models::{Connection, Model};
use cbm_core::CbmError;

pub const PAGE_SIZE: usize = 50;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<CbmError> for ApiError {
    fn from(e: CbmError) -> Self {
        let status = match e {
            CbmError::NotInterventable(_) => StatusCode::CONFLICT,
            CbmError::IndexOutOfRange { .. } | CbmError::UnknownGroup(_) => StatusCode::NOT_FOUND,
            CbmError::InvalidConfig(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::unprocessable(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

struct Session {
    example_id: usize,
    state: Option<InterventionState>,
    trace: InterventionTrace,
}

struct Inner {
    model: Model,
    data: Dataset,
    percentiles: Option<LogitPercentiles>,
    groups: BTreeMap<usize, Vec<usize>>,
    sessions: Mutex<HashMap<u64, Arc<Mutex<Session>>>>,
    next_session: AtomicU64,
}

/// Shared application state; cheap to clone.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// `percentiles` are required to apply oracle values to logit-connected models.
    pub fn new(model: Model, data: Dataset, percentiles: Option<LogitPercentiles>) -> Result<Self, CbmError> {
        if model.task() != data.task() {
            return Err(CbmError::SchemaMismatch("model and dataset tasks differ".into()));
        }
        if let Ok(m) = model.as_bottleneck() {
            if m.k() != data.k() || (!data.is_empty() && m.d() != data.d()) {
                return Err(CbmError::SchemaMismatch(format!(
                    "model expects d={}, k={}; dataset has d={}, k={}",
                    m.d(),
                    m.k(),
                    data.d(),
                    data.k()
                )));
            }
        }
        let groups = data.schema().groups();
        Ok(Self(Arc::new(Inner {
            model,
            data,
            percentiles,
            groups,
            sessions: Mutex::new(HashMap::new()),
            next_session: AtomicU64::new(1),
        })))
    }

    fn example(&self, id: usize) -> Result<&cbm_core::data::LabeledExample, ApiError> {
        self.0
            .data
            .examples()
            .get(id)
            .ok_or_else(|| ApiError::not_found(format!("unknown example {id}")))
    }

    fn session(&self, id: u64) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.0
            .sessions
            .lock()
            .expect("session map poisoned")
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/model", get(model_info))
        .route("/examples", get(list_examples))
        .route("/examples/{id}", get(example_detail))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_view))
        .route("/sessions/{id}/intervene", post(intervene))
        .route("/sessions/{id}/reset", post(reset))
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub family: String,
    pub task: Task,
    pub regime: Option<serde_json::Value>,
    pub connection: Option<Connection>,
    pub interventable: bool,
    pub k: usize,
    pub schema: ConceptSchema,
    pub groups: BTreeMap<usize, Vec<usize>>,
}

async fn model_info(State(app): State<AppState>) -> ApiResult<ModelInfo> {
    let model = &app.0.model;
    let family = match model {
        Model::Bottleneck(_) => "bottleneck",
        Model::Standard(_) => "standard",
        Model::Multitask(_) => "multitask",
    };
    let bottleneck = model.as_bottleneck().ok();
    Ok(Json(ModelInfo {
        family: family.into(),
        task: model.task(),
        regime: bottleneck.map(|m| serde_json::to_value(m.regime).expect("regime serializes")),
        connection: bottleneck.map(|m| m.connection),
        interventable: bottleneck.is_some(),
        k: app.0.data.k(),
        schema: app.0.data.schema().clone(),
        groups: app.0.groups.clone(),
    }))
}

#[derive(Debug, Deserialize)]
struct PageQuery {
    split: Option<String>,
    #[serde(default)]
    page: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleSummary {
    pub id: usize,
    /// Whether every concept has a ground-truth value the oracle may reveal.
    pub oracle_complete: bool,
    pub visibility: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamplePage {
    pub split: Split,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub items: Vec<ExampleSummary>,
}

async fn list_examples(
    State(app): State<AppState>,
    query: Result<Query<PageQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<ExamplePage> {
    let Query(q) = query.map_err(|e| ApiError::unprocessable(e.body_text()))?;
    let data = &app.0.data;
    if let Some(s) = q.split {
        let split: Split = s.parse().map_err(|e: CbmError| ApiError::unprocessable(e.to_string()))?;
        if split != data.split() {
            return Err(ApiError::not_found(format!("no {s} split loaded")));
        }
    }
    let items = data
        .examples()
        .iter()
        .enumerate()
        .skip(q.page.saturating_mul(PAGE_SIZE))
        .take(PAGE_SIZE)
        .map(|(id, e)| ExampleSummary {
            id,
            oracle_complete: e.visibility.iter().all(|&v| v),
            visibility: e.visibility.clone(),
        })
        .collect();
    Ok(Json(ExamplePage {
        split: data.split(),
        page: q.page,
        page_size: PAGE_SIZE,
        total: data.len(),
        items,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub d: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleDetail {
    pub id: usize,
    pub x: InputSummary,
    pub y: f64,
    /// Raw concept outputs of `g` (logits for classification).
    pub predicted_concepts: Option<Vec<f64>>,
    pub concept_probabilities: Option<Vec<f64>>,
    pub visibility: Vec<bool>,
    pub prediction: Vec<f64>,
}

async fn example_detail(State(app): State<AppState>, Path(id): Path<usize>) -> ApiResult<ExampleDetail> {
    let e = app.example(id)?;
    let model = &app.0.model;
    let predicted = model.forward_concepts(&e.x)?;
    let probabilities = match (model.task(), &predicted) {
        (Task::Classification { .. }, Some(scores)) => Some(Connection::Probabilities.connect(scores)),
        _ => None,
    };
    let n = e.x.len().max(1) as f64;
    Ok(Json(ExampleDetail {
        id,
        x: InputSummary {
            d: e.x.len(),
            min: e.x.iter().copied().fold(f64::INFINITY, f64::min),
            max: e.x.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: e.x.iter().sum::<f64>() / n,
        },
        y: e.y,
        predicted_concepts: predicted,
        concept_probabilities: probabilities,
        visibility: e.visibility.clone(),
        prediction: model.forward_target(&e.x)?,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub example_id: usize,
}

/// A session's current view: `f`'s input (absent for models without a
/// bottleneck), the prediction, and the trace so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: u64,
    pub example_id: usize,
    pub concepts: Option<Vec<f64>>,
    pub prediction: Vec<f64>,
    pub trace: InterventionTrace,
}

fn view(id: u64, s: &Session) -> SessionView {
    SessionView {
        session_id: id,
        example_id: s.example_id,
        concepts: s.state.as_ref().map(|st| st.f_input.clone()),
        prediction: s
            .state
            .as_ref()
            .map_or_else(|| s.trace.initial_prediction.clone(), |st| st.prediction.clone()),
        trace: s.trace.clone(),
    }
}

fn fresh_session(app: &AppState, example_id: usize) -> Result<Session, ApiError> {
    let e = app.example(example_id)?;
    let model = &app.0.model;
    let state = match model.as_bottleneck() {
        Ok(m) => Some(InterventionState::new(m, &e.x)?),
        Err(_) => None,
    };
    let initial = match &state {
        Some(s) => s.prediction.clone(),
        None => model.forward_target(&e.x)?,
    };
    Ok(Session {
        example_id,
        state,
        trace: InterventionTrace::new(example_id, initial),
    })
}

async fn create_session(
    State(app): State<AppState>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let Json(req) = body?;
    let session = fresh_session(&app, req.example_id)?;
    let id = app.0.next_session.fetch_add(1, Ordering::Relaxed);
    let v = view(id, &session);
    app.0
        .sessions
        .lock()
        .expect("session map poisoned")
        .insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(v)))
}

async fn session_view(State(app): State<AppState>, Path(id): Path<u64>) -> ApiResult<SessionView> {
    let s = app.session(id)?;
    let guard = s.lock().expect("session poisoned");
    Ok(Json(view(id, &guard)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Impose the annotator's value under the usual replacement rules.
    Oracle,
    /// Write `value` directly into `f`'s input.
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterveneRequest {
    pub target: Target,
    pub mode: Mode,
    #[serde(default)]
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterveneResponse {
    pub session_id: u64,
    pub concepts: Vec<f64>,
    pub prediction: Vec<f64>,
    pub step: TraceStep,
}

async fn intervene(
    State(app): State<AppState>,
    Path(id): Path<u64>,
    body: Result<Json<InterveneRequest>, JsonRejection>,
) -> ApiResult<InterveneResponse> {
    let s = app.session(id)?;
    let Json(req) = body?;
    let m = app.0.model.as_bottleneck()?;
    let concepts = match req.target {
        Target::Concept(j) if j < m.k() => vec![j],
        Target::Concept(j) => return Err(ApiError::not_found(format!("unknown concept {j}"))),
        Target::Group(g) => expand_groups(&app.0.groups, &[g])?,
    };
    let mut guard = s.lock().expect("session poisoned");
    let session = &mut *guard;
    let state = session.state.as_mut().expect("bottleneck sessions carry state");
    let imposed = match (req.mode, req.value) {
        (Mode::Oracle, None) => {
            let e = app.example(session.example_id)?;
            let entry = OracleEntry {
                c: e.c.clone(),
                visibility: e.visibility.clone(),
            };
            state.apply_oracle(m, &concepts, &entry, app.0.percentiles.as_ref())?
        }
        (Mode::Manual, Some(v)) if v.is_finite() => {
            let values: Vec<(usize, f64)> = concepts.iter().map(|&j| (j, v)).collect();
            state.set(m, &values)?;
            values
        }
        (Mode::Manual, Some(_)) => return Err(ApiError::unprocessable("value must be finite")),
        (Mode::Manual, None) => return Err(ApiError::unprocessable("manual mode needs a value")),
        (Mode::Oracle, Some(_)) => return Err(ApiError::unprocessable("oracle mode takes no value")),
    };
    let step = TraceStep {
        target: req.target,
        imposed,
        prediction: state.prediction.clone(),
    };
    session.trace.steps.push(step.clone());
    Ok(Json(InterveneResponse {
        session_id: id,
        concepts: state.f_input.clone(),
        prediction: state.prediction.clone(),
        step,
    }))
}

async fn reset(State(app): State<AppState>, Path(id): Path<u64>) -> ApiResult<SessionView> {
    let s = app.session(id)?;
    let mut guard = s.lock().expect("session poisoned");
    *guard = fresh_session(&app, guard.example_id)?;
    Ok(Json(view(id, &guard)))
}
