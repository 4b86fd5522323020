//! Streaming chat service: `POST /v1/chat` and `GET /v1/stats`.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use imp_core::generate::GenerationConfig;
use imp_core::llm::KvCache;
use imp_core::manifest::{keys, Manifest};
use imp_core::multimodal::MultimodalModel;
use imp_core::profile::{median, run_turn, StageTimings, Turn};
use imp_core::vision::RgbImage;
use imp_core::{DType, Error};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{mpsc, OwnedSemaphorePermit, Semaphore};

use crate::bench::WallClock;
use crate::image_io::decode_image;

pub const DEFAULT_MAX_SESSIONS: usize = 64;
pub const DEFAULT_MAX_IMAGE_BYTES: usize = 8 * 1024 * 1024;
/// Runs kept for the rolling medians in `/v1/stats`.
pub const STATS_WINDOW: usize = 256;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub max_image_bytes: usize,
    pub workers: usize,
    pub max_sessions: usize,
    pub cors_origin: Option<String>,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            max_image_bytes: DEFAULT_MAX_IMAGE_BYTES,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            max_sessions: DEFAULT_MAX_SESSIONS,
            cors_origin: None,
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelInfo {
    pub name: String,
    pub precision: String,
    pub size_bytes: u64,
    pub n_visual: usize,
}

/// `general.precision` if recorded, otherwise the dtype holding the most
/// matrix bytes.
pub fn model_precision(m: &Manifest) -> String {
    if let Ok(Some(p)) = m.get_str(keys::GENERAL_PRECISION) {
        return p.to_string();
    }
    let mut bytes: Vec<(DType, u64)> = Vec::new();
    for t in m.tensors().iter().filter(|t| t.shape.len() >= 2) {
        match bytes.iter_mut().find(|(d, _)| *d == t.dtype) {
            Some((_, b)) => *b += t.nbytes(),
            None => bytes.push((t.dtype, t.nbytes())),
        }
    }
    bytes
        .iter()
        .max_by_key(|(_, b)| *b)
        .map_or(DType::F32, |(d, _)| *d)
        .name()
        .to_string()
}

impl ModelInfo {
    pub fn new(manifest: &Manifest, model: &MultimodalModel, size_bytes: u64) -> Self {
        Self {
            name: manifest
                .get_str(keys::GENERAL_NAME)
                .ok()
                .flatten()
                .unwrap_or("model")
                .to_string(),
            precision: model_precision(manifest),
            size_bytes,
            n_visual: model.vision.config.n_tokens(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, Deserialize)]
pub struct WireMessage {
    pub role: Role,
    pub content: String,
    #[serde(default)]
    pub image_b64: Option<String>,
}

/// Generation fields of a request; omitted fields take the defaults and an
/// omitted stop set means "stop at end-of-sequence".
#[derive(Debug, Clone, Default, Deserialize)]
pub struct GenerationParams {
    pub max_new_tokens: Option<usize>,
    pub temperature: Option<f32>,
    pub top_p: Option<f32>,
    pub seed: Option<u64>,
    pub stop_ids: Option<Vec<u32>>,
}

impl GenerationParams {
    fn resolve(&self, eos: u32) -> GenerationConfig {
        let d = GenerationConfig::default();
        GenerationConfig {
            max_new_tokens: self.max_new_tokens.unwrap_or(d.max_new_tokens),
            temperature: self.temperature.unwrap_or(d.temperature),
            top_p: self.top_p.unwrap_or(d.top_p),
            seed: self.seed.unwrap_or(d.seed),
            stop_ids: self.stop_ids.clone().unwrap_or_else(|| vec![eos]),
        }
    }
}

fn default_stream() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
pub struct ChatRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    pub messages: Vec<WireMessage>,
    #[serde(default = "default_stream")]
    pub stream: bool,
    #[serde(default)]
    pub generation: GenerationParams,
}

#[derive(Debug, Clone, PartialEq)]
struct HistoryEntry {
    role: Role,
    text: String,
    has_image: bool,
}

struct Session {
    history: Vec<HistoryEntry>,
    cache: KvCache,
    /// Last reply token, produced but not yet in the cache.
    pending: Option<u32>,
    totals: StageTimings,
}

pub struct AppState {
    model: Arc<MultimodalModel>,
    info: ModelInfo,
    cfg: ServerConfig,
    sessions: Mutex<IndexMap<String, Arc<tokio::sync::Mutex<Session>>>>,
    workers: Arc<Semaphore>,
    stats: Mutex<(usize, VecDeque<StageTimings>)>,
}

impl AppState {
    pub fn new(model: MultimodalModel, info: ModelInfo, cfg: ServerConfig) -> Arc<Self> {
        let workers = Arc::new(Semaphore::new(cfg.workers.max(1)));
        Arc::new(Self {
            model: Arc::new(model),
            info,
            cfg,
            sessions: Mutex::new(IndexMap::new()),
            workers,
            stats: Mutex::new((0, VecDeque::new())),
        })
    }

    pub fn info(&self) -> &ModelInfo {
        &self.info
    }

    fn session(&self, id: &str) -> Option<Arc<tokio::sync::Mutex<Session>>> {
        let mut map = self.sessions.lock().unwrap();
        let (i, _, s) = map.get_full(id)?;
        let s = s.clone();
        let last = map.len() - 1;
        map.move_index(i, last);
        Some(s)
    }

    fn create_session(&self, id: String) -> Arc<tokio::sync::Mutex<Session>> {
        let s = Arc::new(tokio::sync::Mutex::new(Session {
            history: Vec::new(),
            cache: self.model.llm.new_cache(),
            pending: None,
            totals: StageTimings::default(),
        }));
        let mut map = self.sessions.lock().unwrap();
        while map.len() >= self.cfg.max_sessions.max(1) {
            map.shift_remove_index(0);
        }
        map.insert(id, s.clone());
        s
    }

    fn drop_session(&self, id: &str) {
        self.sessions.lock().unwrap().shift_remove(id);
    }

    fn record(&self, t: StageTimings) {
        let mut s = self.stats.lock().unwrap();
        s.0 += 1;
        s.1.push_back(t);
        if s.1.len() > STATS_WINDOW {
            s.1.pop_front();
        }
    }

    /// Model info plus run count and rolling medians.
    pub fn stats_json(&self) -> serde_json::Value {
        let s = self.stats.lock().unwrap();
        let col = |f: fn(&StageTimings) -> Option<f64>| median(&s.1.iter().filter_map(f).collect::<Vec<_>>());
        json!({
            "model": self.info,
            "count": s.0,
            "median_s_prompt": col(|t| t.s_prompt),
            "median_s_gen": col(|t| t.s_gen),
            "median_t_total": col(|t| Some(t.t_total)),
        })
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    advisory: Option<&'static str>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            advisory: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(a) = self.advisory {
            body["advisory"] = json!(a);
        }
        (self.status, Json(body)).into_response()
    }
}

fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::Capacity { .. } => StatusCode::CONFLICT,
        Error::Argument(_) | Error::Template(_) | Error::Format(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn decode_upload(b64: &str, limit: usize) -> Result<RgbImage, ApiError> {
    let too_big = || {
        ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("image exceeds the {limit}-byte limit"),
        )
    };
    if b64.len() / 4 * 3 > limit + 3 {
        return Err(too_big());
    }
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("image_b64 is not valid base64: {e}")))?;
    if bytes.len() > limit {
        return Err(too_big());
    }
    decode_image(&bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))
}

fn to_history(m: &WireMessage) -> HistoryEntry {
    HistoryEntry {
        role: m.role.clone(),
        text: m.content.clone(),
        has_image: m.image_b64.is_some(),
    }
}

/// Everything needed to run one validated turn.
struct Prepared {
    session_id: String,
    session: tokio::sync::OwnedMutexGuard<Session>,
    created: bool,
    prompt: String,
    has_image_text: bool,
    image: Option<RgbImage>,
    cfg: GenerationConfig,
}

async fn prepare(state: &AppState, body: &[u8]) -> Result<(Prepared, bool), ApiError> {
    let req: ChatRequest = serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))?;
    let Some(last) = req.messages.last() else {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "messages must not be empty"));
    };
    if last.role != Role::User {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "the last message must have role \"user\"",
        ));
    }
    for (i, m) in req.messages.iter().enumerate() {
        let want = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if m.role != want {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "roles must alternate starting with \"user\"",
            ));
        }
    }
    let cfg = req.generation.resolve(state.model.tokenizer.special().eos);
    cfg.validate()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let image = match &last.image_b64 {
        Some(b64) => Some(decode_upload(b64, state.cfg.max_image_bytes)?),
        None => None,
    };

    let earlier: Vec<HistoryEntry> = req.messages[..req.messages.len() - 1].iter().map(to_history).collect();
    let (session_id, handle, created) = match &req.session_id {
        Some(id) => match state.session(id) {
            Some(s) => (id.clone(), s, false),
            None if earlier.is_empty() => (id.clone(), state.create_session(id.clone()), true),
            None => {
                return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id:?}")));
            }
        },
        None => {
            if !earlier.is_empty() {
                return Err(ApiError::new(
                    StatusCode::BAD_REQUEST,
                    "earlier messages require the session_id they belong to",
                ));
            }
            let id = uuid::Uuid::new_v4().simple().to_string();
            (id.clone(), state.create_session(id), true)
        }
    };
    let session = handle.lock_owned().await;
    if !earlier.is_empty() && earlier != session.history {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "messages do not match the session history",
        ));
    }

    // refuse before streaming anything if the turn cannot fit
    let first = session.history.is_empty();
    let ids = match state.model.render(&last.content, image.is_some(), first) {
        Ok(ids) => ids,
        Err(e) => {
            if created {
                state.drop_session(&session_id);
            }
            return Err(ApiError::new(status_for(&e), e.to_string()));
        }
    };
    let n_visual = if image.is_some() { state.info.n_visual } else { 0 };
    let n_prompt = ids.len() + session.pending.iter().count() + n_visual - usize::from(image.is_some());
    let needed = session.cache.len() + n_prompt + cfg.max_new_tokens - 1;
    if needed > session.cache.capacity() {
        if created {
            state.drop_session(&session_id);
        }
        return Err(ApiError {
            status: StatusCode::CONFLICT,
            message: format!(
                "turn needs {needed} context positions but the session holds at most {}",
                session.cache.capacity()
            ),
            advisory: Some("start a new session"),
        });
    }
    Ok((
        Prepared {
            session_id,
            session,
            created,
            prompt: last.content.clone(),
            has_image_text: last.image_b64.is_some(),
            image,
            cfg,
        },
        req.stream,
    ))
}

#[derive(Debug, Clone, Serialize)]
struct TurnOutcome {
    text: String,
    tokens: Vec<u32>,
    stats: StageTimings,
    context_used: usize,
}

/// Runs the turn on a blocking thread and commits it to the session.
/// `emit` receives each decoded fragment and its token index.
fn execute(
    state: &AppState,
    p: &mut Prepared,
    mut emit: impl FnMut(&str, usize) -> bool,
) -> Result<TurnOutcome, Error> {
    let model = &state.model;
    let s = &mut *p.session;
    let start_len = s.cache.len();
    let prefix: Vec<u32> = s.pending.into_iter().collect();
    let turn = Turn {
        prompt: &p.prompt,
        image: p.image.as_ref(),
        first: s.history.is_empty(),
        prefix_ids: &prefix,
    };
    let mut stream = model.tokenizer.stream();
    let mut index = 0usize;
    let mut stream_err = None;
    let run = run_turn(model, &mut s.cache, turn, &p.cfg, &WallClock::new(), |id| {
        let i = index;
        index += 1;
        match stream.push(id) {
            Ok(frag) if frag.is_empty() => true,
            Ok(frag) => emit(&frag, i),
            Err(e) => {
                stream_err = Some(e);
                false
            }
        }
    });
    let run = match (run, stream_err) {
        (Ok(r), None) => r,
        (Ok(_), Some(e)) | (Err(_), Some(e)) => {
            s.cache.truncate(start_len);
            return Err(e);
        }
        (Err(e), None) => {
            s.cache.truncate(start_len);
            return Err(e.error);
        }
    };
    let tail = stream.finish();
    if !tail.is_empty() {
        emit(&tail, index.saturating_sub(1));
    }
    let text = model.tokenizer.decode(&run.generation.tokens)?;
    s.pending = run.generation.tokens.last().copied();
    s.history.push(HistoryEntry {
        role: Role::User,
        text: p.prompt.clone(),
        has_image: p.has_image_text,
    });
    s.history.push(HistoryEntry {
        role: Role::Assistant,
        text: text.clone(),
        has_image: false,
    });
    let t = run.timings;
    let tot = &mut s.totals;
    *tot = StageTimings::from_measurements(
        tot.t_ve + t.t_ve,
        tot.t_prompt + t.t_prompt,
        tot.t_gen + t.t_gen,
        tot.n_prompt + t.n_prompt,
        tot.n_gen + t.n_gen,
        tot.t_total + t.t_total,
    );
    state.record(t);
    Ok(TurnOutcome {
        text,
        tokens: run.generation.tokens,
        stats: t,
        context_used: s.cache.len(),
    })
}

fn ndjson_line(v: &serde_json::Value) -> Bytes {
    let mut b = serde_json::to_vec(v).expect("json values serialize");
    b.push(b'\n');
    Bytes::from(b)
}

async fn chat(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let (mut prepared, stream) = match prepare(&state, &body).await {
        Ok(p) => p,
        Err(e) => return e.into_response(),
    };
    let permit: OwnedSemaphorePermit = state.workers.clone().acquire_owned().await.expect("semaphore open");
    if !stream {
        let st = state.clone();
        let joined = tokio::task::spawn_blocking(move || {
            let _permit = permit;
            let r = execute(&st, &mut prepared, |_, _| true);
            if r.is_err() && prepared.created {
                st.drop_session(&prepared.session_id);
            }
            r.map(|o| (prepared.session_id.clone(), o))
        })
        .await;
        return match joined {
            Ok(Ok((id, o))) => Json(json!({
                "session_id": id,
                "text": o.text,
                "tokens": o.tokens,
                "stats": o.stats,
                "context_used": o.context_used,
            }))
            .into_response(),
            Ok(Err(e)) => ApiError::new(status_for(&e), e.to_string()).into_response(),
            Err(e) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
        };
    }

    let (tx, rx) = mpsc::channel::<Bytes>(64);
    let st = state.clone();
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let r = execute(&st, &mut prepared, |text, index| {
            tx.blocking_send(ndjson_line(&json!({"type": "token", "text": text, "index": index})))
                .is_ok()
        });
        let last = match r {
            Ok(o) => json!({
                "type": "done",
                "session_id": prepared.session_id,
                "stats": o.stats,
                "context_used": o.context_used,
            }),
            Err(e) => {
                if prepared.created {
                    st.drop_session(&prepared.session_id);
                }
                json!({"type": "error", "error": e.to_string(), "status": status_for(&e).as_u16()})
            }
        };
        let _ = tx.blocking_send(ndjson_line(&last));
    });
    let body = futures_util::stream::unfold(rx, |mut rx| async move {
        rx.recv().await.map(|b| (Ok::<_, std::convert::Infallible>(b), rx))
    });
    Response::builder()
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .body(Body::from_stream(body))
        .expect("static response parts")
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(state.stats_json())
}

pub fn router(state: Arc<AppState>) -> Router {
    // base64 inflates by 4/3; leave room for the rest of the JSON
    let body_limit = state.cfg.max_image_bytes / 3 * 4 + 64 * 1024;
    let mut app = Router::new()
        .route("/v1/chat", post(chat))
        .route("/v1/stats", get(stats))
        .layer(DefaultBodyLimit::max(body_limit));
    if let Some(dir) = &state.cfg.static_dir {
        app = app.fallback_service(tower_http::services::ServeDir::new(dir));
    }
    if let Some(origin) = &state.cfg.cors_origin {
        let cors = tower_http::cors::CorsLayer::new()
            .allow_methods([Method::GET, Method::POST])
            .allow_headers([header::CONTENT_TYPE]);
        let cors = match origin.as_str() {
            "*" => cors.allow_origin(tower_http::cors::Any),
            o => match HeaderValue::from_str(o) {
                Ok(v) => cors.allow_origin(v),
                Err(_) => cors,
            },
        };
        app = app.layer(cors);
    }
    app.with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, host: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
