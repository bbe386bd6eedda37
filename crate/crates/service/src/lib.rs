//! HTTP front end for collaboration sessions.
//!
//! | method | path | body |
//! |---|---|---|
//! | POST | `/v1/sessions` | [`api::CreateSessionRequest`] |
//! | POST | `/v1/sessions/{id}/pick` | [`api::PickRequest`] |
//! | POST | `/v1/sessions/{id}/correct` | [`api::CorrectionRequest`] |
//! | POST | `/v1/sessions/{id}/simulate` | none |
//! | GET | `/v1/sessions/{id}/state` | |
//! | GET | `/v1/sessions/{id}/metrics` | |
//! | GET | `/v1/sessions/{id}/events` | server-sent events |
//! | GET | `/v1/checkpoints` | |
//!
//! Each session is a single-writer state machine behind its own lock, so
//! requests to one session are serialized while distinct sessions proceed
//! independently.

pub mod api;

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::sync::broadcast;
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::{Stream, StreamExt};

use blrhac::adapt::{AgentFactory, AgentKind, TransformerAdaptConfig, DEFAULT_ALPHA};
use blrhac::nn::Checkpoint;
use blrhac::session::Session;
use blrhac::{Error, PreferenceMatrix};

use api::*;

/// Server-side resources shared by all sessions.
#[derive(Clone, Debug, Default)]
pub struct ServiceConfig {
    pub checkpoint_dir: Option<PathBuf>,
    /// Preferences a simulated leader may play; never sent to clients.
    pub leaders: Vec<PreferenceMatrix>,
}

struct SessionSlot {
    session: Mutex<Session>,
    events: broadcast::Sender<SessionEvent>,
}

pub struct AppState {
    cfg: ServiceConfig,
    sessions: Mutex<BTreeMap<String, Arc<SessionSlot>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(cfg: ServiceConfig) -> Arc<Self> {
        Arc::new(AppState {
            cfg,
            sessions: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
        })
    }
}

#[derive(Debug)]
pub enum ApiError {
    Core(Error),
    UnknownSession(String),
    MissingCheckpoint(String),
    BadRequest(String),
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError::Core(e)
    }
}

impl ApiError {
    fn parts(&self) -> (StatusCode, String, String) {
        match self {
            ApiError::UnknownSession(id) => (
                StatusCode::NOT_FOUND,
                "unknown_session".into(),
                format!("no session `{id}`"),
            ),
            ApiError::MissingCheckpoint(n) => (
                StatusCode::NOT_FOUND,
                "missing_checkpoint".into(),
                format!("checkpoint `{n}` not found"),
            ),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, "bad_request".into(), m.clone()),
            ApiError::Core(e) => {
                let status = match e {
                    Error::OutOfTurn(_) | Error::OccupiedLocation(_) | Error::AlreadyPlaced(_) => {
                        StatusCode::CONFLICT
                    }
                    Error::Divergence { .. } | Error::Io { .. } => {
                        StatusCode::INTERNAL_SERVER_ERROR
                    }
                    _ => StatusCode::BAD_REQUEST,
                };
                (status, e.code().into(), e.to_string())
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code, message) = self.parts();
        let body = Envelope::new(ErrorBody {
            error: ErrorDetail { code, message },
        });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<Envelope<T>>, ApiError>;

fn ok<T: Serialize>(body: T) -> ApiResult<T> {
    Ok(Json(Envelope::new(body)))
}

/// Parses a request body; malformed JSON yields a coded 400 error.
pub fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::BadRequest(e.to_string()))
}

fn valid_checkpoint_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn load_checkpoint(dir: Option<&Path>, name: &str) -> Result<Checkpoint, ApiError> {
    let missing = || ApiError::MissingCheckpoint(name.to_string());
    let dir = dir.ok_or_else(missing)?;
    if !valid_checkpoint_name(name) {
        return Err(ApiError::BadRequest(format!(
            "invalid checkpoint name `{name}`"
        )));
    }
    let path = dir.join(name);
    if !path.is_file() {
        return Err(missing());
    }
    Ok(Checkpoint::load(path)?)
}

fn slot(state: &AppState, id: &str) -> Result<Arc<SessionSlot>, ApiError> {
    state
        .sessions
        .lock()
        .expect("session table lock")
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::UnknownSession(id.to_string()))
}

/// Runs `f` on the session off the async workers; fine-tuning can be slow.
async fn with_session<T, F>(state: &AppState, id: &str, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&mut Session, &broadcast::Sender<SessionEvent>) -> Result<T, ApiError>
        + Send
        + 'static,
{
    let slot = slot(state, id)?;
    tokio::task::spawn_blocking(move || {
        let mut session = slot.session.lock().expect("session lock");
        f(&mut session, &slot.events)
    })
    .await
    .map_err(|e| ApiError::Core(Error::Session(format!("worker failed: {e}"))))?
}

fn publish_turn(
    session: &Session,
    events: &broadcast::Sender<SessionEvent>,
    result: &blrhac::session::TurnResult,
) {
    // send errors only mean nobody is listening
    let _ = events.send(SessionEvent::Turn {
        result: result.clone(),
    });
    let _ = events.send(SessionEvent::State {
        state: session.state(),
    });
    let _ = events.send(SessionEvent::Metrics {
        metrics: session.metrics(),
    });
    if let Some(theta) = session.theta() {
        let _ = events.send(SessionEvent::Theta { theta });
    }
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<CreateSessionResponse> {
    let req: CreateSessionRequest = parse_body(&body)?;
    let env = req.env.resolve()?;
    let alpha = req.alpha.unwrap_or(DEFAULT_ALPHA);
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(ApiError::BadRequest("alpha must be positive".into()));
    }
    let leader = match &req.simulated_leader {
        None => None,
        Some(l) => Some(
            state
                .cfg
                .leaders
                .get(l.preference_index)
                .cloned()
                .ok_or_else(|| {
                    ApiError::BadRequest(format!("no leader preference {}", l.preference_index))
                })?,
        ),
    };
    let checkpoint_dir = state.cfg.checkpoint_dir.clone();
    let req2 = req.clone();
    let session = tokio::task::spawn_blocking(move || -> Result<Session, ApiError> {
        let factory = match req2.agent {
            AgentKind::LinearScratch => AgentFactory::LinearScratch { alpha },
            kind => {
                let name = req2
                    .checkpoint
                    .as_deref()
                    .ok_or_else(|| ApiError::MissingCheckpoint(String::new()))?;
                let ck = load_checkpoint(checkpoint_dir.as_deref(), name)?;
                if ck.model.env() != &env {
                    return Err(Error::DimensionMismatch(
                        "checkpoint environment differs from the session".into(),
                    )
                    .into());
                }
                if kind == AgentKind::BlrHac {
                    AgentFactory::blr_hac(&ck.model, alpha)?
                } else {
                    AgentFactory::OnlineTransformer {
                        model: ck.model,
                        cfg: TransformerAdaptConfig::default(),
                    }
                }
            }
        };
        Ok(Session::new(&env, &factory, req2.seed, leader)?)
    })
    .await
    .map_err(|e| ApiError::Core(Error::Session(format!("worker failed: {e}"))))??;

    let id = format!("s{}", state.next_id.fetch_add(1, Ordering::Relaxed));
    let resp = CreateSessionResponse {
        session_id: id.clone(),
        state: session.state(),
        theta: session.theta(),
    };
    let (tx, _) = broadcast::channel(256);
    state.sessions.lock().expect("session table lock").insert(
        id,
        Arc::new(SessionSlot {
            session: Mutex::new(session),
            events: tx,
        }),
    );
    ok(resp)
}

async fn submit_pick(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<PickResponse> {
    let req: PickRequest = parse_body(&body)?;
    let proposal = with_session(&state, &id, move |s, events| {
        let p = s.submit_pick(req.object)?;
        let _ = events.send(SessionEvent::Proposal {
            proposal: p.clone(),
        });
        let _ = events.send(SessionEvent::State { state: s.state() });
        Ok(p)
    })
    .await?;
    ok(PickResponse { proposal })
}

async fn submit_correction(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<CorrectionResponse> {
    let req: CorrectionRequest = parse_body(&body)?;
    let result = with_session(&state, &id, move |s, events| {
        let r = s.submit_correction(req.location)?;
        publish_turn(s, events, &r);
        Ok(r)
    })
    .await?;
    ok(CorrectionResponse { result })
}

async fn simulate(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<SimulateResponse> {
    let (proposal, result) = with_session(&state, &id, |s, events| {
        let (p, r) = s.simulate_turn()?;
        let _ = events.send(SessionEvent::Proposal {
            proposal: p.clone(),
        });
        publish_turn(s, events, &r);
        Ok((p, r))
    })
    .await?;
    ok(SimulateResponse { proposal, result })
}

async fn get_state(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<StateResponse> {
    let st = with_session(&state, &id, |s, _| Ok(s.state())).await?;
    ok(StateResponse { state: st })
}

async fn get_metrics(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<MetricsResponse> {
    let metrics = with_session(&state, &id, |s, _| Ok(s.metrics())).await?;
    ok(MetricsResponse { metrics })
}

/// Checkpoint files in the configured directory that parse and validate.
pub fn scan_checkpoints(dir: &Path) -> Vec<CheckpointInfo> {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".json") && valid_checkpoint_name(n))
        .collect();
    names.sort();
    names
        .into_iter()
        .filter_map(|name| {
            let ck = Checkpoint::load(dir.join(&name)).ok()?;
            Some(CheckpointInfo {
                name,
                model: ck.model.spec().clone(),
            })
        })
        .collect()
}

async fn list_checkpoints(State(state): State<Arc<AppState>>) -> ApiResult<CheckpointList> {
    let dir = state.cfg.checkpoint_dir.clone();
    let checkpoints =
        tokio::task::spawn_blocking(move || dir.map(|d| scan_checkpoints(&d)).unwrap_or_default())
            .await
            .map_err(|e| ApiError::Core(Error::Session(format!("worker failed: {e}"))))?;
    ok(CheckpointList { checkpoints })
}

fn to_sse(ev: &SessionEvent) -> Event {
    let data = serde_json::to_string(&Envelope::new(ev)).expect("events serialize");
    Event::default().event(ev.name()).data(data)
}

async fn events(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let slot = slot(&state, &id)?;
    let rx = slot.events.subscribe();
    let initial = {
        let s = slot.session.lock().expect("session lock");
        SessionEvent::State { state: s.state() }
    };
    let first = tokio_stream::once(Ok(to_sse(&initial)));
    let rest = BroadcastStream::new(rx).filter_map(|msg| msg.ok().map(|ev| Ok(to_sse(&ev))));
    Ok(Sse::new(first.chain(rest)).keep_alive(KeepAlive::default()))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/:id/pick", post(submit_pick))
        .route("/v1/sessions/:id/correct", post(submit_correction))
        .route("/v1/sessions/:id/simulate", post(simulate))
        .route("/v1/sessions/:id/state", get(get_state))
        .route("/v1/sessions/:id/metrics", get(get_metrics))
        .route("/v1/sessions/:id/events", get(events))
        .route("/v1/checkpoints", get(list_checkpoints))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, cfg: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(cfg))).await
}
