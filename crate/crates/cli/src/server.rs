//! HTTP control API.
//!
//! | method | path                  | body / query                         |
//! |--------|-----------------------|--------------------------------------|
//! | POST   | `/campaign`           | campaign config (+ `device`)         |
//! | GET    | `/campaign`           |                                      |
//! | POST   | `/campaign/decision`  | `{"action": "rerun_iteration"}` ...  |
//! | GET    | `/campaign/events`    | `?since=N`, server-sent events       |
//! | GET    | `/campaign/log`       | `?since=N`, JSON list                |
//! | GET    | `/artifacts`          | `?results_dir=...`                   |
//! | POST   | `/preprocess`         | `{"results_dir": ...}`               |
//! | POST   | `/analysis`           | `{"data": [...], "spec": {...}}`     |
//! | POST   | `/plot`               | `{"data": [...], "spec": {...}}`     |
//! | GET    | `/data/columns`       | `?path=...`                          |
//!
//! One campaign runs at a time. Its mutations are serialised through a
//! dedicated thread fed by a command queue; every event is appended to a
//! log and fanned out to stream subscribers.

use std::collections::VecDeque;
use std::convert::Infallible;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, Mutex};

use anyhow::Context;
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, oneshot};
use voltlab_core::campaign::{Campaign, CampaignConfig, CampaignError, CampaignEvent, CampaignState, EventKind};
use voltlab_core::device::SimulatedDeviceConfig;
use voltlab_core::parsers::ParseMode;
use voltlab_core::plot::PlotSpec;
use voltlab_core::preprocess::{PreprocessOptions, PreprocessSummary};
use voltlab_core::stats::AnalysisSpec;
use voltlab_core::{DeviceAction, SimulatedDevice};

use crate::stages::{self, resolve, AnalysisOutput, ColumnInfo};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl From<anyhow::Error> for ApiError {
    fn from(e: anyhow::Error) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, format!("{e:#}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

enum Command {
    Decide(DeviceAction, oneshot::Sender<Result<(), String>>),
}

struct Slot {
    view: CampaignView,
    commands: mpsc::Sender<Command>,
}

struct Shared {
    workdir: PathBuf,
    slot: Mutex<Option<Slot>>,
    log: Mutex<Vec<CampaignEvent>>,
    wakeup: broadcast::Sender<u64>,
    starting: tokio::sync::Mutex<()>,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignView {
    pub config: CampaignConfig,
    pub state: CampaignState,
    pub running: bool,
    pub error: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct StartRequest {
    #[serde(flatten)]
    pub config: CampaignConfig,
    #[serde(default)]
    pub device: SimulatedDeviceConfig,
}

#[derive(Debug, Deserialize)]
pub struct DecisionRequest {
    pub action: DeviceAction,
}

#[derive(Debug, Deserialize)]
pub struct SinceQuery {
    #[serde(default)]
    pub since: u64,
}

#[derive(Debug, Deserialize)]
pub struct ArtifactsQuery {
    pub results_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ArtifactList {
    pub results_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Deserialize)]
pub struct PreprocessRequest {
    pub results_dir: PathBuf,
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub allow_missing_baseline: bool,
}

#[derive(Debug, Deserialize)]
pub struct AnalysisRequest {
    pub data: Vec<PathBuf>,
    pub spec: AnalysisSpec,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
pub struct PlotRequest {
    pub data: Vec<PathBuf>,
    pub spec: PlotSpec,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
pub struct ColumnsQuery {
    pub path: PathBuf,
}

pub fn app(workdir: impl Into<PathBuf>) -> Router {
    let (wakeup, _) = broadcast::channel(256);
    let state = AppState(Arc::new(Shared {
        workdir: workdir.into(),
        slot: Mutex::new(None),
        log: Mutex::new(Vec::new()),
        wakeup,
        starting: tokio::sync::Mutex::new(()),
    }));
    Router::new()
        .route("/campaign", post(start_campaign).get(get_campaign))
        .route("/campaign/decision", post(post_decision))
        .route("/campaign/events", get(event_stream))
        .route("/campaign/log", get(event_log))
        .route("/artifacts", get(artifacts))
        .route("/preprocess", post(preprocess))
        .route("/analysis", post(analysis))
        .route("/plot", post(plot))
        .route("/data/columns", get(columns))
        .with_state(state)
}

pub async fn serve(bind: &str, port: u16, workdir: PathBuf) -> anyhow::Result<()> {
    let listener =
        tokio::net::TcpListener::bind((bind, port)).await.with_context(|| format!("binding {bind}:{port}"))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app(workdir)).await.context("serving")
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

fn publish(shared: &Shared, update: impl FnOnce(&mut CampaignView)) {
    if let Some(slot) = shared.slot.lock().unwrap().as_mut() {
        update(&mut slot.view);
    }
}

fn campaign_thread(shared: Arc<Shared>, mut campaign: Campaign, commands: mpsc::Receiver<Command>) {
    let mut error = None;
    while campaign.state().is_active() {
        if campaign.state().awaiting_decision {
            let Ok(Command::Decide(action, reply)) = commands.recv() else { break };
            let result = campaign.decide(action);
            let state = campaign.state().clone();
            publish(&shared, |v| v.state = state);
            let _ = reply.send(result.map(|_| ()).map_err(|e| e.to_string()));
        } else {
            while let Ok(Command::Decide(_, reply)) = commands.try_recv() {
                let _ = reply.send(Err("no decision is pending".into()));
            }
            if let Err(e) = campaign.execute_iteration() {
                error = Some(e.to_string());
                break;
            }
            let state = campaign.state().clone();
            publish(&shared, |v| v.state = state);
        }
    }
    let state = campaign.state().clone();
    publish(&shared, |v| {
        v.state = state;
        v.running = false;
        v.error = error;
    });
}

async fn start_campaign(
    State(AppState(shared)): State<AppState>,
    Json(req): Json<StartRequest>,
) -> ApiResult<(StatusCode, Json<CampaignView>)> {
    let Ok(_guard) = shared.starting.try_lock() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "a campaign is being started"));
    };
    if shared.slot.lock().unwrap().as_ref().is_some_and(|s| s.view.running) {
        return Err(ApiError::new(StatusCode::CONFLICT, "a campaign is already active"));
    }
    let sh = shared.clone();
    let view = blocking(move || {
        let mut config = req.config;
        config.results_dir = resolve(&sh.workdir, &config.results_dir);
        sh.log.lock().unwrap().clear();
        let observer_shared = sh.clone();
        let observer = Box::new(move |e: &CampaignEvent| {
            observer_shared.log.lock().unwrap().push(e.clone());
            let _ = observer_shared.wakeup.send(e.seq);
        });
        let device = Box::new(SimulatedDevice::new(req.device));
        let campaign = Campaign::start_observed(config, device, Some(observer)).map_err(|e| {
            let status = match e {
                CampaignError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
                _ => StatusCode::UNPROCESSABLE_ENTITY,
            };
            ApiError::new(status, e.to_string())
        })?;
        let (tx, rx) = mpsc::channel();
        let view = CampaignView {
            config: campaign.config().clone(),
            state: campaign.state().clone(),
            running: true,
            error: None,
        };
        *sh.slot.lock().unwrap() = Some(Slot { view: view.clone(), commands: tx });
        let thread_shared = sh.clone();
        std::thread::spawn(move || campaign_thread(thread_shared, campaign, rx));
        Ok(view)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(view)))
}

fn current_view(shared: &Shared) -> ApiResult<CampaignView> {
    shared
        .slot
        .lock()
        .unwrap()
        .as_ref()
        .map(|s| s.view.clone())
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no campaign has been started"))
}

async fn get_campaign(State(AppState(shared)): State<AppState>) -> ApiResult<Json<CampaignView>> {
    current_view(&shared).map(Json)
}

async fn post_decision(
    State(AppState(shared)): State<AppState>,
    Json(req): Json<DecisionRequest>,
) -> ApiResult<Json<CampaignView>> {
    let commands = {
        let slot = shared.slot.lock().unwrap();
        match slot.as_ref() {
            None => return Err(ApiError::new(StatusCode::NOT_FOUND, "no campaign has been started")),
            Some(s) if s.view.running && s.view.state.awaiting_decision => s.commands.clone(),
            Some(_) => return Err(ApiError::new(StatusCode::CONFLICT, "no decision is pending")),
        }
    };
    let (reply, answer) = oneshot::channel();
    commands
        .send(Command::Decide(req.action, reply))
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "campaign is no longer running"))?;
    match answer.await {
        Ok(Ok(())) => current_view(&shared).map(Json),
        Ok(Err(msg)) => Err(ApiError::new(StatusCode::CONFLICT, msg)),
        Err(_) => Err(ApiError::new(StatusCode::CONFLICT, "campaign is no longer running")),
    }
}

fn events_after(shared: &Shared, seq: u64) -> Vec<CampaignEvent> {
    shared.log.lock().unwrap().iter().filter(|e| e.seq > seq).cloned().collect()
}

async fn event_log(
    State(AppState(shared)): State<AppState>,
    Query(q): Query<SinceQuery>,
) -> Json<Vec<CampaignEvent>> {
    Json(events_after(&shared, q.since))
}

struct Cursor {
    shared: Arc<Shared>,
    wakeup: broadcast::Receiver<u64>,
    last: u64,
    pending: VecDeque<CampaignEvent>,
    finished: bool,
}

/// Events after `since`, then live ones, ending after `campaign_done`. The
/// log is authoritative; the broadcast only signals that it grew, so a
/// lagging subscriber still sees every event.
fn campaign_events(shared: Arc<Shared>, since: u64) -> impl Stream<Item = CampaignEvent> {
    let wakeup = shared.wakeup.subscribe();
    let cursor = Cursor { shared, wakeup, last: since, pending: VecDeque::new(), finished: false };
    stream::unfold(cursor, |mut c| async move {
        loop {
            if c.finished {
                return None;
            }
            if let Some(e) = c.pending.pop_front() {
                c.last = e.seq;
                c.finished = e.kind == EventKind::CampaignDone;
                return Some((e, c));
            }
            c.pending.extend(events_after(&c.shared, c.last));
            if c.pending.is_empty() {
                match c.wakeup.recv().await {
                    Ok(_) | Err(broadcast::error::RecvError::Lagged(_)) => {}
                    Err(broadcast::error::RecvError::Closed) => return None,
                }
            }
        }
    })
}

async fn event_stream(
    State(AppState(shared)): State<AppState>,
    Query(q): Query<SinceQuery>,
    headers: HeaderMap,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let resume = headers.get("last-event-id").and_then(|v| v.to_str().ok()).and_then(|v| v.parse().ok());
    let since = resume.unwrap_or(q.since);
    let events = campaign_events(shared, since).map(|e| {
        let kind = serde_json::to_value(e.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        let event = Event::default().id(e.seq.to_string()).event(kind);
        Ok(event.json_data(&e).expect("event serializes"))
    });
    Sse::new(events).keep_alive(KeepAlive::default())
}

async fn artifacts(
    State(AppState(shared)): State<AppState>,
    Query(q): Query<ArtifactsQuery>,
) -> ApiResult<Json<ArtifactList>> {
    let results_dir = match q.results_dir {
        Some(d) => resolve(&shared.workdir, &d),
        None => current_view(&shared)?.config.results_dir,
    };
    let dir = results_dir.clone();
    let files = blocking(move || Ok(stages::list_files(&dir)?)).await?;
    Ok(Json(ArtifactList { results_dir, files }))
}

fn resolve_all(base: &Path, paths: &[PathBuf]) -> Vec<PathBuf> {
    paths.iter().map(|p| resolve(base, p)).collect()
}

async fn preprocess(
    State(AppState(shared)): State<AppState>,
    Json(req): Json<PreprocessRequest>,
) -> ApiResult<Json<PreprocessSummary>> {
    let dir = resolve(&shared.workdir, &req.results_dir);
    let opts = PreprocessOptions {
        mode: if req.strict { ParseMode::Strict } else { ParseMode::Lenient },
        allow_missing_baseline: req.allow_missing_baseline,
    };
    blocking(move || Ok(stages::preprocess(&dir, opts)?)).await.map(Json)
}

async fn analysis(
    State(AppState(shared)): State<AppState>,
    Json(req): Json<AnalysisRequest>,
) -> ApiResult<Json<AnalysisOutput>> {
    let data = resolve_all(&shared.workdir, &req.data);
    let out_dir = req.out_dir.map(|d| resolve(&shared.workdir, &d));
    blocking(move || Ok(stages::analyze(&data, &req.spec, out_dir.as_deref())?)).await.map(Json)
}

async fn plot(State(AppState(shared)): State<AppState>, Json(req): Json<PlotRequest>) -> ApiResult<Response> {
    let data = resolve_all(&shared.workdir, &req.data);
    let out = req.out.map(|p| resolve(&shared.workdir, &p));
    let svg = blocking(move || Ok(stages::plot(&data, &req.spec, out.as_deref())?)).await?;
    Ok(([(header::CONTENT_TYPE, "image/svg+xml")], svg).into_response())
}

async fn columns(
    State(AppState(shared)): State<AppState>,
    Query(q): Query<ColumnsQuery>,
) -> ApiResult<Json<Vec<ColumnInfo>>> {
    let path = resolve(&shared.workdir, &q.path);
    blocking(move || Ok(stages::columns(&path)?)).await.map(Json)
}
