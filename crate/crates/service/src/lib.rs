//! HTTP + WebSocket session service around the `ergodic_imitation` core.
//!
//! Sessions own a live simulation ticked server-side; demos recorded there
//! feed `learn`, and learned tasks drive controller rollouts whose states are
//! streamed back on the session's live channel.

pub mod session;

use std::collections::HashMap;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ergodic_imitation::baselines::{PlanarTask, Scenario};
use ergodic_imitation::mpc::{run_closed_loop_with, MpcConfig, RolloutResult};
use ergodic_imitation::pipeline::{self, EvalContext};
use ergodic_imitation::spectral::DensityGrid;
use ergodic_imitation::task::learn_task;
use ergodic_imitation::{DemoSet, FusionConfig, FusionMode, SystemKind, TaskDefinition};
use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use session::{ClientMsg, RolloutSummary, ServerMsg, Session, SessionInfo};

pub const DEFAULT_PORT: u16 = 8753;
pub const DEFAULT_TICK_RATE: f64 = 50.0;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub host: IpAddr,
    pub port: u16,
    pub tick_rate: f64,
    /// Allowed browser origins; `*` allows any. Empty disables CORS headers.
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: DEFAULT_PORT,
            tick_rate: DEFAULT_TICK_RATE,
            cors_origins: Vec::new(),
        }
    }
}

type SessionRef = Arc<Mutex<Session>>;

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    tick_rate: f64,
    sessions: Mutex<HashMap<String, SessionRef>>,
    tasks: Mutex<HashMap<String, Arc<TaskDefinition>>>,
    next_session: AtomicU64,
    next_task: AtomicU64,
}

impl AppState {
    pub fn new(tick_rate: f64) -> Self {
        Self {
            inner: Arc::new(Inner {
                tick_rate,
                sessions: Mutex::new(HashMap::new()),
                tasks: Mutex::new(HashMap::new()),
                next_session: AtomicU64::new(0),
                next_task: AtomicU64::new(0),
            }),
        }
    }

    fn session(&self, id: &str) -> Result<SessionRef, ApiError> {
        lock(&self.inner.sessions)
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id:?}")))
    }

    fn task(&self, id: &str) -> Result<Arc<TaskDefinition>, ApiError> {
        lock(&self.inner.tasks)
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no task {id:?}")))
    }
}

// A poisoned lock only means another handler panicked mid-update; the data
// is still structurally valid.
fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

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

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }
}

impl From<ergodic_imitation::Error> for ApiError {
    fn from(e: ergodic_imitation::Error) -> Self {
        match e {
            ergodic_imitation::Error::Io(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
            other => Self::new(StatusCode::UNPROCESSABLE_ENTITY, other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState, cors_origins: &[String]) -> Router {
    let app = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/learn", post(learn))
        .route("/sessions/{id}/rollout", post(rollout))
        .route("/sessions/{id}/rollout/cancel", post(cancel_rollout))
        .route("/sessions/{id}/rollout/last.csv", get(last_rollout_csv))
        .route("/sessions/{id}/demos/{demo}", axum::routing::delete(delete_demo))
        .route("/sessions/{id}/live", get(live))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/density", get(density))
        .route("/demos", get(export_demos).put(import_demos))
        .with_state(state);
    if cors_origins.is_empty() {
        return app;
    }
    let origin = if cors_origins.iter().any(|o| o == "*") {
        AllowOrigin::from(Any)
    } else {
        AllowOrigin::list(cors_origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    app.layer(CorsLayer::new().allow_origin(origin).allow_methods(Any).allow_headers(Any))
}

/// Binds, reports the bound address, then serves until the process exits.
pub async fn run(cfg: ServiceConfig, on_ready: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    if !(cfg.tick_rate > 0.0 && cfg.tick_rate.is_finite()) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!("tick rate must be positive, got {}", cfg.tick_rate),
        ));
    }
    let listener = tokio::net::TcpListener::bind((cfg.host, cfg.port)).await?;
    on_ready(listener.local_addr()?);
    let app = router(AppState::new(cfg.tick_rate), &cfg.cors_origins);
    axum::serve(listener, app).await
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    system: String,
    scenario: Option<PlanarTask>,
    tick_rate: Option<f64>,
    /// Tick only on `{"type":"tick"}` messages instead of the wall clock.
    #[serde(default)]
    manual_clock: bool,
}

async fn create_session(State(app): State<AppState>, Json(req): Json<CreateSession>) -> ApiResult<(StatusCode, Json<SessionInfo>)> {
    let system: SystemKind = req.system.parse().map_err(|e: ergodic_imitation::Error| ApiError::bad_request(e.to_string()))?;
    if req.scenario.is_some() && system != SystemKind::Planar {
        return Err(ApiError::bad_request("scenarios apply to the planar system only"));
    }
    let rate = req.tick_rate.unwrap_or(app.inner.tick_rate);
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(ApiError::bad_request(format!("tick rate must be positive, got {rate}")));
    }
    let id = format!("s{}", app.inner.next_session.fetch_add(1, Ordering::Relaxed));
    let session = Arc::new(Mutex::new(Session::new(id.clone(), system, req.scenario, rate, req.manual_clock)));
    let info = lock(&session).info();
    lock(&app.inner.sessions).insert(id, session.clone());
    if !req.manual_clock {
        tokio::spawn(tick_loop(Arc::downgrade(&session), rate));
    }
    Ok((StatusCode::CREATED, Json(info)))
}

/// Wall-clock ticking. Simulated time advances by exactly one period per
/// executed tick; late ticks are skipped and counted as dropped frames.
async fn tick_loop(session: std::sync::Weak<Mutex<Session>>, rate: f64) {
    let period = Duration::from_secs_f64(1.0 / rate);
    let mut interval = tokio::time::interval(period);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    let mut last = Instant::now();
    loop {
        interval.tick().await;
        let Some(s) = session.upgrade() else { break };
        let now = Instant::now();
        let late = (now - last).as_secs_f64() / period.as_secs_f64();
        last = now;
        let mut s = lock(&s);
        if late > 1.5 {
            s.add_dropped(late.round() as u64 - 1);
        }
        s.tick();
    }
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionInfo>> {
    let s = app.session(&id)?;
    let info = lock(&s).info();
    Ok(Json(info))
}

async fn delete_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let s = lock(&app.inner.sessions)
        .remove(&id)
        .ok_or_else(|| ApiError::not_found(format!("no session {id:?}")))?;
    lock(&s).cancel_rollout();
    Ok(StatusCode::NO_CONTENT)
}

async fn delete_demo(State(app): State<AppState>, Path((id, demo)): Path<(String, String)>) -> ApiResult<StatusCode> {
    let s = app.session(&id)?;
    if lock(&s).remove_demo(&demo) {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::not_found(format!("no demo {demo:?}")))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LearnRequest {
    /// Defaults to every demo in the session.
    demo_ids: Option<Vec<String>>,
    mode: FusionMode,
    order: Option<usize>,
    beta: Option<f64>,
    gamma: Option<f64>,
    res: Option<usize>,
    clip: Option<bool>,
}

#[derive(Debug, Serialize)]
struct LearnResponse {
    task_id: String,
    mode: FusionMode,
    order: usize,
    weight_sum: f64,
    density: DensityGrid,
}

async fn learn(State(app): State<AppState>, Path(id): Path<String>, Json(req): Json<LearnRequest>) -> ApiResult<Json<LearnResponse>> {
    let s = app.session(&id)?;
    let set = {
        let s = lock(&s);
        match &req.demo_ids {
            Some(ids) => s.demos.select(ids).map_err(|e| ApiError::not_found(e.to_string()))?,
            None => s.demos.clone(),
        }
    };
    let defaults = FusionConfig::default();
    let cfg = FusionConfig {
        order: req.order.unwrap_or(defaults.order),
        beta: req.beta.unwrap_or(defaults.beta),
        gamma: req.gamma.unwrap_or(defaults.gamma),
    };
    let res = req.res.unwrap_or(64);
    let clip = req.clip.unwrap_or(true);
    let (task, density) = tokio::task::spawn_blocking(move || -> ergodic_imitation::Result<_> {
        let task = learn_task(&set, req.mode, &cfg)?;
        let density = task.density(res, clip)?;
        Ok((task, density))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let task_id = format!("task-{}", app.inner.next_task.fetch_add(1, Ordering::Relaxed));
    let response = LearnResponse {
        task_id: task_id.clone(),
        mode: task.mode,
        order: task.order(),
        weight_sum: task.weight_sum(),
        density,
    };
    lock(&app.inner.tasks).insert(task_id.clone(), Arc::new(task));
    lock(&s).tasks.push(task_id);
    Ok(Json(response))
}

async fn get_task(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let json = app.task(&id)?.to_json()?;
    Ok(([(header::CONTENT_TYPE, "application/json")], json).into_response())
}

#[derive(Debug, Deserialize)]
struct DensityQuery {
    res: Option<usize>,
    clip: Option<bool>,
}

async fn density(State(app): State<AppState>, Path(id): Path<String>, Query(q): Query<DensityQuery>) -> ApiResult<Json<DensityGrid>> {
    let task = app.task(&id)?;
    Ok(Json(task.density(q.res.unwrap_or(64), q.clip.unwrap_or(true))?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RolloutRequest {
    task_id: String,
    duration: f64,
    /// `key -> value` overrides on top of the benchmark preset.
    #[serde(default)]
    mpc: HashMap<String, serde_json::Value>,
    /// Defaults to the session's current state.
    x0: Option<Vec<f64>>,
    /// Return immediately; the summary arrives on the live channel.
    #[serde(default)]
    background: bool,
}

fn mpc_config(overrides: &HashMap<String, serde_json::Value>) -> ApiResult<MpcConfig> {
    let mut cfg = MpcConfig::benchmark();
    let mut keys: Vec<_> = overrides.keys().collect();
    keys.sort();
    for k in keys {
        let v = match &overrides[k] {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Array(a) => a.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
            other => other.to_string(),
        };
        cfg.set(k, &v)?;
    }
    Ok(cfg)
}

async fn rollout(State(app): State<AppState>, Path(id): Path<String>, Json(req): Json<RolloutRequest>) -> ApiResult<Response> {
    let s = app.session(&id)?;
    let task = app.task(&req.task_id)?;
    let cfg = mpc_config(&req.mpc)?;
    let (system, scenario, x0, cancel, tx, stride) = {
        let mut g = lock(&s);
        let x0 = req.x0.clone().unwrap_or_else(|| g.state().to_vec());
        if x0.len() != g.system.state_dim() {
            return Err(ApiError::bad_request(format!("x0 has {} entries, expected {}", x0.len(), g.system.state_dim())));
        }
        let sample_dt = cfg.sim_dt * cfg.record_every as f64;
        let stride = ((1.0 / g.tick_rate) / sample_dt).round().max(1.0) as usize;
        let cancel = g.begin_rollout().map_err(ApiError::conflict)?;
        (g.system, g.scenario, x0, cancel, g.sender(), stride)
    };
    let task_id = req.task_id.clone();
    let duration = req.duration;
    let worker_session = s.clone();
    let handle = tokio::task::spawn_blocking(move || {
        let mut k = 0usize;
        let mut observer = |t: f64, x: &[f64], u: &[f64]| {
            if k % stride == 0 {
                let _ = tx.send(ServerMsg::RolloutState {
                    t,
                    x: x.to_vec(),
                    u: u.to_vec(),
                });
            }
            k += 1;
            true
        };
        let out = run_closed_loop_with(system.build(), &task, &cfg, &x0, duration, Some(&cancel), &mut observer);
        let ctx = EvalContext {
            mode: task.mode.to_string(),
            scenario: scenario.map(Scenario::for_task),
            true_task: None,
        };
        let (summary, result) = match out.and_then(|r| summarize(&task_id, &r, &ctx).map(|s| (s, r))) {
            Ok((s, r)) => (Ok(s), Some(Arc::new(r))),
            Err(e) => (Err(e), None),
        };
        let mut g = lock(&worker_session);
        match &summary {
            Ok(s) => g.end_rollout(s.clone(), result),
            Err(e) => {
                let failed = failed_summary(&task_id, e.to_string(), &ctx);
                g.end_rollout(failed, None);
            }
        }
        summary
    });
    if req.background {
        return Ok((StatusCode::ACCEPTED, Json(serde_json::json!({ "status": "started" }))).into_response());
    }
    let summary = handle
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(summary).into_response())
}

fn summarize(task_id: &str, r: &RolloutResult, ctx: &EvalContext) -> ergodic_imitation::Result<RolloutSummary> {
    Ok(RolloutSummary {
        task_id: task_id.to_string(),
        samples: r.trajectory.len(),
        duration: r.trajectory.duration(),
        final_eps: r.final_eps,
        final_state: r.trajectory.states.last().cloned().unwrap_or_default(),
        replans: r.replans.len(),
        cancelled: r.cancelled,
        error: r.error.clone(),
        metrics: pipeline::evaluate(task_id, &r.trajectory, ctx)?,
    })
}

fn failed_summary(task_id: &str, error: String, ctx: &EvalContext) -> RolloutSummary {
    RolloutSummary {
        task_id: task_id.to_string(),
        samples: 0,
        duration: 0.0,
        final_eps: f64::NAN,
        final_state: Vec::new(),
        replans: 0,
        cancelled: false,
        error: Some(error),
        metrics: pipeline::MetricsRow {
            rollout: task_id.to_string(),
            mode: ctx.mode.clone(),
            success_time: None,
            first_success: None,
            eps_true: None,
            cleaning_m: None,
            reach: None,
            collided: None,
        },
    }
}

async fn cancel_rollout(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let s = app.session(&id)?;
    if lock(&s).cancel_rollout() {
        Ok(StatusCode::ACCEPTED)
    } else {
        Err(ApiError::conflict("no rollout is running"))
    }
}

async fn last_rollout_csv(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = app.session(&id)?;
    let result = lock(&s).last_result.clone().ok_or_else(|| ApiError::not_found("no completed rollout"))?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], result.to_csv()).into_response())
}

#[derive(Debug, Deserialize)]
struct DemosQuery {
    session: String,
}

async fn export_demos(State(app): State<AppState>, Query(q): Query<DemosQuery>) -> ApiResult<Response> {
    let s = app.session(&q.session)?;
    let text = lock(&s).demos.to_jsonl();
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

async fn import_demos(State(app): State<AppState>, Query(q): Query<DemosQuery>, body: String) -> ApiResult<Json<serde_json::Value>> {
    let s = app.session(&q.session)?;
    let set = DemoSet::read_from(body.as_bytes())?;
    let ids = lock(&s).import(set).map_err(ApiError::bad_request)?;
    Ok(Json(serde_json::json!({ "imported": ids })))
}

async fn live(State(app): State<AppState>, Path(id): Path<String>, ws: WebSocketUpgrade) -> ApiResult<Response> {
    let s = app.session(&id)?;
    Ok(ws.on_upgrade(move |socket| live_socket(socket, s)))
}

async fn live_socket(socket: WebSocket, session: SessionRef) {
    let (mut sink, mut stream) = socket.split();
    let (mut updates, first) = {
        let g = lock(&session);
        (g.subscribe(), g.state_msg())
    };
    let (reply_tx, mut replies) = mpsc::unbounded_channel::<ServerMsg>();
    let _ = reply_tx.send(first);

    let writer = tokio::spawn(async move {
        loop {
            let msg = tokio::select! {
                m = replies.recv() => match m {
                    Some(m) => m,
                    None => break,
                },
                m = updates.recv() => match m {
                    Ok(m) => m,
                    Err(broadcast::error::RecvError::Lagged(_)) => continue,
                    Err(broadcast::error::RecvError::Closed) => break,
                },
            };
            let Ok(text) = serde_json::to_string(&msg) else { continue };
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
    });

    while let Some(Ok(frame)) = stream.next().await {
        let text = match frame {
            Message::Text(t) => t,
            Message::Close(_) => break,
            _ => continue,
        };
        let reply = match serde_json::from_str::<ClientMsg>(&text) {
            Ok(msg) => lock(&session).handle(msg),
            Err(e) => Some(ServerMsg::Error {
                message: format!("malformed message: {e}"),
            }),
        };
        if let Some(r) = reply {
            if reply_tx.send(r).is_err() {
                break;
            }
        }
    }
    drop(reply_tx);
    writer.abort();
}
