//! Live evaluation sessions over HTTP.
//!
//! Each session owns one greedy rollout on its own task. Control requests
//! reach it through a queue and are handled between simulator steps; every
//! step produces exactly one [`TelemetryFrame`], which is kept for replay and
//! broadcast to stream subscribers as one JSON line.

mod session;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use imf_core::agents::{AgentSpec, LowerSystems};
use imf_core::experiments::Scenario;
use imf_core::netsim::KpiVector;
use imf_core::supervisor::{StepRecord, SupervisorModel};
use imf_core::utility::{IntentPatch, IntentSet, KpiKind, Service};
use serde::{Deserialize, Serialize};

use crate::pipeline::{profile_config, ModelKind};
pub use session::{AdvanceAck, MutationAck, PendingMutation, RateAck, SessionStatus, SessionView};
use session::{Command, SessionHandle};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationFrame {
    pub id: String,
    pub service: Service,
    pub kpi: KpiKind,
    pub value: f64,
    pub target: f64,
    pub deviation: f64,
    /// Utility feature fed to the DUN.
    pub feature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalFrame {
    pub agent: String,
    pub expectation: String,
    pub level: usize,
    pub goal_value: f64,
    /// Head probability of the chosen level.
    pub probability: f64,
}

/// One simulator step of a session, as sent on the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    pub schema_version: u32,
    pub session: u64,
    pub step: usize,
    /// KPIs after the step's controls took effect.
    pub kpis: KpiVector,
    pub expectations: Vec<ExpectationFrame>,
    /// Global utility of `kpis` under `intents`.
    pub z: f64,
    pub goals: Vec<GoalFrame>,
    /// Intent set the step was decided and scored under.
    pub intents: IntentSet,
}

impl TelemetryFrame {
    pub fn from_record(session: u64, agents: &[AgentSpec], rec: &StepRecord) -> Self {
        let expectations = rec
            .intents
            .iter()
            .map(|e| ExpectationFrame {
                id: e.id.to_string(),
                service: e.service,
                kpi: e.kpi,
                value: rec.kpis.value(e.service, e.kpi).unwrap_or(f64::NAN),
                target: e.target,
                deviation: rec.deviations.iter().find(|(id, _)| *id == e.id).map_or(f64::NAN, |d| d.1),
                feature: rec.features.features.iter().find(|(id, _)| *id == e.id).map_or(f64::NAN, |f| f.1),
            })
            .collect();
        let goals = agents
            .iter()
            .zip(&rec.decision.goals)
            .zip(&rec.decision.probs)
            .map(|((a, g), p)| GoalFrame {
                agent: a.id.clone(),
                expectation: g.expectation.to_string(),
                level: g.level,
                goal_value: g.goal_value,
                probability: p[g.level],
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            session,
            step: rec.step,
            kpis: rec.kpis,
            expectations,
            z: rec.z,
            goals,
            intents: rec.intents.clone(),
        }
    }
}

/// Trained models for one slice profile and agent roster.
#[derive(Debug)]
pub struct ModelBundle {
    pub profile: String,
    pub lower: LowerSystems,
    pub proposed: SupervisorModel,
    pub baseline: SupervisorModel,
}

impl ModelBundle {
    pub fn model(&self, kind: ModelKind) -> &SupervisorModel {
        match kind {
            ModelKind::Proposed => &self.proposed,
            ModelKind::Baseline => &self.baseline,
        }
    }

    fn key(&self) -> (String, Vec<String>) {
        (self.profile.clone(), self.lower.specs.iter().map(|s| s.id.clone()).collect())
    }
}

/// Model bundles, matched to scenarios by profile and agent roster.
#[derive(Debug, Default)]
pub struct Registry {
    bundles: Vec<Arc<ModelBundle>>,
}

impl Registry {
    pub fn insert(&mut self, bundle: ModelBundle) {
        let key = bundle.key();
        self.bundles.retain(|b| b.key() != key);
        self.bundles.push(Arc::new(bundle));
    }

    pub fn resolve(&self, scenario: &Scenario) -> Option<Arc<ModelBundle>> {
        let cfg = profile_config(&scenario.profile).ok()?;
        let roster: Vec<String> = AgentSpec::roster(&cfg, &scenario.intents).into_iter().map(|s| s.id).collect();
        self.bundles.iter().find(|b| b.key() == (scenario.profile.clone(), roster.clone())).cloned()
    }

    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }
}

pub struct AppState {
    scenarios: BTreeMap<String, Scenario>,
    registry: Registry,
    sessions: Mutex<HashMap<u64, SessionHandle>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(scenarios: impl IntoIterator<Item = Scenario>, registry: Registry) -> Arc<Self> {
        Arc::new(Self {
            scenarios: scenarios.into_iter().map(|s| (s.name.clone(), s)).collect(),
            registry,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    fn session(&self, id: u64) -> Result<SessionHandle, ApiError> {
        self.sessions.lock().unwrap().get(&id).cloned().ok_or(ApiError::NotFound(format!("no session {id}")))
    }
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(String),
    Conflict(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (code, msg) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (code, Json(serde_json::json!({ "error": msg }))).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub scenario: String,
    pub model: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Created {
    pub id: u64,
    pub status: SessionStatus,
    pub step: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvanceRequest {
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateRequest {
    pub steps_per_second: f64,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/:id", get(get_session))
        .route("/sessions/:id/advance", post(advance))
        .route("/sessions/:id/rate", post(set_rate))
        .route("/sessions/:id/intents", axum::routing::patch(mutate_intents))
        .route("/sessions/:id/stream", get(stream))
        .with_state(state)
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let scenario = state
        .scenarios
        .get(&req.scenario)
        .ok_or_else(|| ApiError::BadRequest(format!("unknown scenario `{}`", req.scenario)))?;
    let kind = ModelKind::parse(&req.model)
        .ok_or_else(|| ApiError::BadRequest(format!("unknown model `{}` (proposed or baseline)", req.model)))?;
    let bundle = state
        .registry
        .resolve(scenario)
        .ok_or_else(|| ApiError::BadRequest(format!("no trained models for scenario `{}`", req.scenario)))?;
    let id = state.next_id.fetch_add(1, Ordering::Relaxed);
    let handle = session::spawn(id, scenario.clone(), kind, bundle, req.seed).map_err(|e| ApiError::Internal(e.to_string()))?;
    let created = Created { id, status: SessionStatus::Paused, step: 0, horizon: scenario.horizon };
    state.sessions.lock().unwrap().insert(id, handle);
    Ok((StatusCode::CREATED, Json(created)))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> Result<Json<SessionView>, ApiError> {
    let h = state.session(id)?;
    Ok(Json(h.request(|reply| Command::View { reply }).await?))
}

async fn advance(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
    Json(req): Json<AdvanceRequest>,
) -> Result<Json<AdvanceAck>, ApiError> {
    let h = state.session(id)?;
    Ok(Json(h.request(|reply| Command::Advance { steps: req.steps, reply }).await??))
}

async fn set_rate(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
    Json(req): Json<RateRequest>,
) -> Result<Json<RateAck>, ApiError> {
    let h = state.session(id)?;
    Ok(Json(h.request(|reply| Command::SetRate { steps_per_second: req.steps_per_second, reply }).await??))
}

async fn mutate_intents(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
    Json(patch): Json<IntentPatch>,
) -> Result<Json<MutationAck>, ApiError> {
    let h = state.session(id)?;
    Ok(Json(h.request(|reply| Command::Mutate { patch, reply }).await??))
}

async fn stream(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> Result<Response, ApiError> {
    let h = state.session(id)?;
    let sub = h.request(|reply| Command::Subscribe { reply }).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from_stream(sub.into_stream())).into_response())
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: &str, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "gateway listening");
    axum::serve(listener, router(state)).await
}
