//! Network front end for listening sessions.
//!
//! * `POST /sessions` with `{"condition": "control" | "bc" | "bc_al"}` creates a
//!   session and returns `{session_id, ws_url}`.
//! * `GET /sessions/{id}/stream` upgrades to a WebSocket carrying
//!   [`wire::ClientMessage`]s in and [`wire::WireEvent`]s out.
//! * `GET /sessions/{id}/transcript` returns the persisted JSONL transcript.
//! * `GET /sessions/{id}/scores?backend=heuristic|llm` returns disclosure
//!   scores as CSV.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, Query, State, WebSocketUpgrade};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rapport_core::backchannel::{Lexicon, LlmSentiment, SentimentBackend};
use rapport_core::completion::{CompletionClient, HttpCompletionClient, MockCompletionClient};
use rapport_core::disclosure::{score_transcript, write_scores_csv, DisclosureScorer, HeuristicScorer, LlmScorer};
use rapport_core::session::{Action, Condition, Phase, Session};
use rapport_core::transcript::{Transcript, TranscriptError, TranscriptEvent, TranscriptWriter};
use serde::Deserialize;
use serde_json::json;

pub mod config;
mod stream;
pub mod wire;

pub use config::{ConfigError, GatewayConfig, ListenerBackend, SentimentChoice};

/// Completion and sentiment backends shared by all sessions.
#[derive(Clone)]
pub struct Backends {
    pub completion: Arc<dyn CompletionClient>,
    pub sentiment: Arc<dyn SentimentBackend>,
}

impl Backends {
    pub fn from_config(cfg: &GatewayConfig) -> Self {
        let completion: Arc<dyn CompletionClient> = match cfg.listener_backend {
            ListenerBackend::Llm => Arc::new(HttpCompletionClient::new(cfg.llm.clone())),
            ListenerBackend::Mock => Arc::new(MockCompletionClient::default()),
        };
        let sentiment: Arc<dyn SentimentBackend> = match cfg.sentiment_backend {
            SentimentChoice::Lexicon => Arc::new(Lexicon::bundled()),
            SentimentChoice::Llm => Arc::new(LlmSentiment::new(completion.clone())),
        };
        Self { completion, sentiment }
    }
}

pub(crate) struct Live {
    pub session: Session,
    writer: TranscriptWriter,
    persisted: usize,
    /// Listener request to re-issue if a stream drops mid-response.
    pub pending_response: Option<Action>,
    /// Media time at the end of the last audio frame.
    pub audio_cursor: Option<u64>,
}

impl Live {
    /// Appends events recorded since the last call to the transcript file
    /// and returns them.
    pub fn persist_new(&mut self) -> Result<Vec<TranscriptEvent>, TranscriptError> {
        let fresh: Vec<TranscriptEvent> = self.session.transcript().events[self.persisted..].to_vec();
        for e in &fresh {
            self.writer.append(e)?;
        }
        self.persisted += fresh.len();
        Ok(fresh)
    }
}

pub(crate) struct SessionSlot {
    pub id: String,
    pub path: PathBuf,
    pub live: tokio::sync::Mutex<Live>,
    pub connected: AtomicBool,
    pub done: AtomicBool,
    pub started: Instant,
}

impl SessionSlot {
    /// Wall-clock milliseconds since the session was created.
    pub fn wall_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }
}

pub struct AppState {
    pub cfg: GatewayConfig,
    pub backends: Backends,
    sessions: Mutex<HashMap<String, Arc<SessionSlot>>>,
}

impl AppState {
    pub fn new(cfg: GatewayConfig, backends: Backends) -> std::io::Result<Arc<Self>> {
        std::fs::create_dir_all(&cfg.data_dir)?;
        Ok(Arc::new(Self {
            cfg,
            backends,
            sessions: Mutex::new(HashMap::new()),
        }))
    }

    fn slot(&self, id: &str) -> Option<Arc<SessionSlot>> {
        self.sessions.lock().unwrap().get(id).cloned()
    }

    fn transcript_path(&self, id: &str) -> Option<PathBuf> {
        let safe = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-');
        safe.then(|| self.cfg.data_dir.join(format!("{id}.jsonl")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/stream", get(stream_session))
        .route("/sessions/{id}/transcript", get(get_transcript))
        .route("/sessions/{id}/scores", get(get_scores))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

#[derive(Deserialize)]
struct CreateSession {
    condition: String,
}

async fn create_session(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let req: CreateSession = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid body: {e}")),
    };
    let condition: Condition = match req.condition.parse() {
        Ok(c) => c,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("{e}")),
    };

    let id = uuid::Uuid::new_v4().to_string();
    let path = state.cfg.data_dir.join(format!("{id}.jsonl"));
    let created_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
    let mut session = Session::new(id.clone(), condition, state.cfg.session.clone(), created_at);
    if let Err(e) = session.next_prompt(0) {
        return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    }
    let writer = match TranscriptWriter::create(&path, &session.transcript().header) {
        Ok(w) => w,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    let mut live = Live {
        session,
        writer,
        persisted: 0,
        pending_response: None,
        audio_cursor: None,
    };
    if let Err(e) = live.persist_new() {
        return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    }

    {
        let mut sessions = state.sessions.lock().unwrap();
        let active = sessions.values().filter(|s| !s.done.load(Ordering::SeqCst)).count();
        if active >= state.cfg.max_sessions {
            drop(sessions);
            let _ = std::fs::remove_file(&path);
            return error(StatusCode::SERVICE_UNAVAILABLE, "session limit reached");
        }
        sessions.insert(
            id.clone(),
            Arc::new(SessionSlot {
                id: id.clone(),
                path,
                live: tokio::sync::Mutex::new(live),
                connected: AtomicBool::new(false),
                done: AtomicBool::new(false),
                started: Instant::now(),
            }),
        );
    }
    log::info!("session {id} created under {condition}");

    let base = match &state.cfg.public_url {
        Some(u) => u.trim_end_matches('/').to_string(),
        None => {
            let host = headers
                .get(header::HOST)
                .and_then(|h| h.to_str().ok())
                .unwrap_or(&state.cfg.listen);
            format!("ws://{host}")
        }
    };
    (
        StatusCode::CREATED,
        Json(json!({
            "session_id": id,
            "condition": condition,
            "ws_url": format!("{base}/sessions/{id}/stream"),
        })),
    )
        .into_response()
}

async fn stream_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> Response {
    let Some(slot) = state.slot(&id) else {
        return error(StatusCode::NOT_FOUND, "no such session");
    };
    if slot.done.load(Ordering::SeqCst) {
        return error(StatusCode::GONE, "session finished");
    }
    if slot.connected.swap(true, Ordering::SeqCst) {
        return error(StatusCode::CONFLICT, "session already has a stream");
    }
    ws.on_upgrade(move |socket| async move {
        stream::run(socket, slot.clone(), state).await;
        slot.connected.store(false, Ordering::SeqCst);
    })
}

async fn get_transcript(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let path = match state.slot(&id) {
        Some(slot) => {
            // hold the session lock so no line is half-written
            let _live = slot.live.lock().await;
            return read_transcript(&slot.path).await;
        }
        None => state.transcript_path(&id),
    };
    match path {
        Some(p) if p.exists() => read_transcript(&p).await,
        _ => error(StatusCode::NOT_FOUND, "no such session"),
    }
}

async fn read_transcript(path: &std::path::Path) -> Response {
    match tokio::fs::read(path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "application/x-ndjson")], bytes).into_response(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => error(StatusCode::NOT_FOUND, "no such session"),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

#[derive(Deserialize)]
struct ScoreQuery {
    backend: Option<String>,
}

async fn get_scores(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<ScoreQuery>,
) -> Response {
    let Some(path) = state.slot(&id).map(|s| s.path.clone()).or_else(|| state.transcript_path(&id)) else {
        return error(StatusCode::NOT_FOUND, "no such session");
    };
    let backend = q.backend.unwrap_or_else(|| "heuristic".into());
    if backend != "heuristic" && backend != "llm" {
        return error(StatusCode::BAD_REQUEST, format!("unknown backend {backend:?}"));
    }
    let completion = state.backends.completion.clone();
    let job = tokio::task::spawn_blocking(move || -> Result<String, (StatusCode, String)> {
        let transcript: Transcript = rapport_core::transcript::load(&path).map_err(|e| match e {
            TranscriptError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                (StatusCode::NOT_FOUND, "no such session".to_string())
            }
            other => (StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        })?;
        let llm;
        let scorer: &dyn DisclosureScorer = if backend == "llm" {
            llm = LlmScorer::new(completion);
            &llm
        } else {
            &HeuristicScorer
        };
        let rows = score_transcript(&transcript, scorer).map_err(|e| (StatusCode::BAD_GATEWAY, e.to_string()))?;
        let mut out = Vec::new();
        write_scores_csv(&mut out, &rows, true).map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        Ok(String::from_utf8(out).expect("CSV is UTF-8"))
    });
    match job.await {
        Ok(Ok(csv)) => ([(header::CONTENT_TYPE, "text/csv")], csv).into_response(),
        Ok(Err((status, msg))) => error(status, msg),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

pub(crate) fn mark_done(slot: &SessionSlot, live: &Live) {
    if live.session.phase() == Phase::Done {
        slot.done.store(true, Ordering::SeqCst);
    }
}
