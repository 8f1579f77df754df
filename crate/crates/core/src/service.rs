//! HTTP chat service: sessions over JSON, transcripts persisted as JSONL.
//!
//! | method | path | success | errors |
//! |---|---|---|---|
//! | POST | `/sessions` | 201 `{session_id}` | 400 no photos |
//! | POST | `/sessions/{id}/photos[?photo_id=..]` | 201 `{photo_id}` | 404, 415 bad magic, 400 bad grid |
//! | POST | `/sessions/{id}/events` | 200 `{actions}` | 404, 409 ended, 400, 503 storage |
//! | GET | `/sessions/{id}/transcript` | 200 `{session_id, entries}` | 404 |
//!
//! Every error body is `{"code": .., "message": ..}`. Each event is applied to
//! a copy of the session, the resulting transcript is written to disk, and
//! only then is the copy committed, so a failed write leaves the in-memory
//! session as it was.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, RwLock};

use crate::chatbot::ChatbotModel;
use crate::checkpoint::{load_checkpoint_of_kind, ModelKind};
use crate::data::FeatureGrid;
use crate::dialogue::{transcript_from_jsonl, transcript_to_jsonl, BotAction, Event, EventKind, Models, Photo, Session, TranscriptEntry};
use crate::error::Error;
use crate::vqg::VqgModel;

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(30 * 60);

#[derive(Clone, Debug, clap::Args)]
pub struct ServiceConfig {
    #[arg(long, env = "ELISA_LISTEN", default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
    #[arg(long, env = "ELISA_VQG_CHECKPOINT")]
    pub vqg_checkpoint: PathBuf,
    #[arg(long, env = "ELISA_CHATBOT_CHECKPOINT")]
    pub chatbot_checkpoint: PathBuf,
    #[arg(long, env = "ELISA_PHOTO_DIR", default_value = "elisa-data/photos")]
    pub photo_dir: PathBuf,
    #[arg(long, env = "ELISA_TRANSCRIPT_DIR", default_value = "elisa-data/transcripts")]
    pub transcript_dir: PathBuf,
    /// Idle timeout in seconds.
    #[arg(long = "idle-timeout", env = "ELISA_IDLE_TIMEOUT", default_value_t = DEFAULT_IDLE_TIMEOUT.as_secs())]
    pub idle_timeout_secs: u64,
}

impl ServiceConfig {
    pub fn idle_timeout(&self) -> Duration {
        Duration::from_secs(self.idle_timeout_secs)
    }
}

/// Loads both checkpoints, rejecting one placed in the wrong slot.
pub fn load_models(vqg_path: &Path, chatbot_path: &Path) -> crate::Result<(Arc<VqgModel>, Arc<ChatbotModel>)> {
    let vqg = VqgModel::from_checkpoint(&load_checkpoint_of_kind(vqg_path, ModelKind::Vqg)?)?;
    let chat = ChatbotModel::from_checkpoint(&load_checkpoint_of_kind(chatbot_path, ModelKind::Chatbot)?)?;
    Ok((Arc::new(vqg), Arc::new(chat)))
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown session {id}"))
    }

    fn storage(err: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "storage_unavailable", format!("could not persist transcript: {err}"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::SessionEnded => Self::new(StatusCode::CONFLICT, "session_ended", e.to_string()),
            Error::InvalidArgument(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_argument", e.to_string()),
            Error::BadMagic { .. } => Self::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, "bad_magic", e.to_string()),
            Error::Format { .. } | Error::UnsupportedVersion(_) => {
                Self::new(StatusCode::BAD_REQUEST, "bad_feature_grid", e.to_string())
            }
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code,
            message: &self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

struct Slot {
    session: Session,
    last_active: Instant,
}

pub struct AppState {
    models: Models,
    /// Column count uploads must have, when known.
    feature_cols: Option<usize>,
    photo_dir: PathBuf,
    transcript_dir: PathBuf,
    idle_timeout: Duration,
    sessions: RwLock<HashMap<String, Arc<Mutex<Slot>>>>,
}

impl AppState {
    pub fn new(models: Models, feature_cols: Option<usize>, photo_dir: PathBuf, transcript_dir: PathBuf, idle_timeout: Duration) -> Self {
        Self {
            models,
            feature_cols,
            photo_dir,
            transcript_dir,
            idle_timeout,
            sessions: RwLock::new(HashMap::new()),
        }
    }

    pub fn from_config(config: &ServiceConfig) -> crate::Result<Self> {
        let (vqg, chat) = load_models(&config.vqg_checkpoint, &config.chatbot_checkpoint)?;
        let cols = vqg.config.annotation_dim;
        Ok(Self::new(
            Models::new(vqg, chat),
            Some(cols),
            config.photo_dir.clone(),
            config.transcript_dir.clone(),
            config.idle_timeout(),
        ))
    }

    pub fn transcript_path(&self, session_id: &str) -> PathBuf {
        self.transcript_dir.join(format!("{session_id}.jsonl"))
    }

    fn persist(&self, session: &Session) -> std::io::Result<()> {
        let text = transcript_to_jsonl(session.transcript()).map_err(std::io::Error::other)?;
        write_atomic(&self.transcript_path(session.id()), text.as_bytes())
    }

    async fn slot(&self, id: &str) -> ApiResult<Arc<Mutex<Slot>>> {
        self.sessions.read().await.get(id).cloned().ok_or_else(|| ApiError::not_found(id))
    }

    /// Ends every session idle for longer than the timeout as of `now`, and
    /// forgets ended sessions that have been idle as long. Returns how many
    /// sessions were ended.
    pub async fn sweep_idle(&self, now: Instant) -> usize {
        let slots: Vec<(String, Arc<Mutex<Slot>>)> =
            self.sessions.read().await.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let mut ended = 0;
        let mut forget = Vec::new();
        for (id, slot) in slots {
            let mut slot = slot.lock().await;
            if now.saturating_duration_since(slot.last_active) < self.idle_timeout {
                continue;
            }
            if slot.session.is_ended() {
                forget.push(id);
                continue;
            }
            let mut next = slot.session.clone();
            next.expire(now_millis());
            match self.persist(&next) {
                Ok(()) => {
                    slot.session = next;
                    ended += 1;
                }
                Err(e) => tracing::warn!(session = %id, error = %e, "could not persist expired session"),
            }
        }
        if !forget.is_empty() {
            let mut map = self.sessions.write().await;
            for id in forget {
                map.remove(&id);
            }
        }
        ended
    }
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn now_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Ids end up in file names, so keep them to a safe alphabet.
fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')) && !id.starts_with('.')
}

#[derive(Debug, Deserialize)]
struct CreateSession {
    #[serde(alias = "photo_ids")]
    photos: Vec<String>,
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PhotoCreated {
    pub photo_id: String,
}

#[derive(Debug, Deserialize)]
struct PhotoQuery {
    photo_id: Option<String>,
}

#[derive(Debug, Deserialize)]
struct EventBody {
    kind: EventKind,
    #[serde(default)]
    payload: String,
    timestamp: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Actions {
    pub actions: Vec<BotAction>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Transcript {
    pub session_id: String,
    pub entries: Vec<TranscriptEntry>,
}

async fn create_session(State(app): State<Arc<AppState>>, body: Option<Json<CreateSession>>) -> ApiResult<(StatusCode, Json<Created>)> {
    let Some(Json(body)) = body else {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_argument", "expected a JSON body {\"photos\": [...]}"));
    };
    if let Some(bad) = body.photos.iter().find(|p| !valid_id(p)) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_argument", format!("invalid photo id {bad:?}")));
    }
    let id = uuid::Uuid::new_v4().simple().to_string();
    let seed = body.seed.unwrap_or_else(rand::random);
    let photos = body.photos.into_iter().map(Photo::new).collect();
    let session = Session::new(id.clone(), photos, seed, app.models.clone())?;
    app.persist(&session).map_err(ApiError::storage)?;
    let slot = Slot {
        session,
        last_active: Instant::now(),
    };
    app.sessions.write().await.insert(id.clone(), Arc::new(Mutex::new(slot)));
    tracing::info!(session = %id, seed, "session created");
    Ok((StatusCode::CREATED, Json(Created { session_id: id })))
}

async fn upload_photo(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<PhotoQuery>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<PhotoCreated>)> {
    let slot = app.slot(&id).await?;
    let grid = FeatureGrid::from_bytes(&body)?;
    if let Some(cols) = app.feature_cols {
        if grid.cols() != cols {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "bad_feature_grid",
                format!("feature grid has {} columns, the model expects {cols}", grid.cols()),
            ));
        }
    }
    let photo_id = match q.photo_id {
        Some(p) if valid_id(&p) => p,
        Some(p) => return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_argument", format!("invalid photo id {p:?}"))),
        None => uuid::Uuid::new_v4().simple().to_string(),
    };

    let mut slot = slot.lock().await;
    if slot.session.is_ended() {
        return Err(Error::SessionEnded.into());
    }
    let path = app.photo_dir.join(&id).join(format!("{photo_id}.feat"));
    write_atomic(&path, &body).map_err(ApiError::storage)?;
    let mut next = slot.session.clone();
    if !next.attach_features(&photo_id, path.clone()) {
        next.handle_event(&Event::add_photo(Photo::with_features(photo_id.clone(), path), now_millis()))?;
        app.persist(&next).map_err(ApiError::storage)?;
    }
    slot.session = next;
    slot.last_active = Instant::now();
    Ok((StatusCode::CREATED, Json(PhotoCreated { photo_id })))
}

async fn post_event(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Option<Json<EventBody>>,
) -> ApiResult<Json<Actions>> {
    let slot = app.slot(&id).await?;
    let Some(Json(body)) = body else {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_argument", "expected a JSON body {\"kind\", \"payload\"}"));
    };
    let event = Event {
        kind: body.kind,
        payload: body.payload,
        timestamp: body.timestamp.unwrap_or_else(now_millis),
        features: None,
    };
    if event.kind == EventKind::AddPhoto && !valid_id(&event.payload) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_argument", "invalid photo id"));
    }

    let mut slot = slot.lock().await;
    let mut next = slot.session.clone();
    // Model inference is CPU-bound; keep it off the async workers.
    let (next, actions) = tokio::task::spawn_blocking(move || {
        let actions = next.handle_event(&event);
        (next, actions)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    let actions = actions?;
    app.persist(&next).map_err(ApiError::storage)?;
    slot.session = next;
    slot.last_active = Instant::now();
    Ok(Json(Actions { actions }))
}

async fn get_transcript(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Transcript>> {
    if !valid_id(&id) {
        return Err(ApiError::not_found(&id));
    }
    let in_memory = app.sessions.read().await.get(&id).cloned();
    let entries = match in_memory {
        Some(slot) => slot.lock().await.session.transcript().to_vec(),
        None => {
            let text = fs::read_to_string(app.transcript_path(&id)).map_err(|_| ApiError::not_found(&id))?;
            transcript_from_jsonl(&text)?
        }
    };
    Ok(Json(Transcript { session_id: id, entries }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/photos", post(upload_photo))
        .route("/sessions/{id}/events", post(post_event))
        .route("/sessions/{id}/transcript", get(get_transcript))
        .with_state(state)
}

/// Serves until ctrl-c. The bound address is printed on stdout as
/// `listening on <addr>` (useful with port 0).
pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let state = Arc::new(AppState::from_config(&config)?);
    fs::create_dir_all(&config.transcript_dir)?;
    fs::create_dir_all(&config.photo_dir)?;

    let sweeper = {
        let state = state.clone();
        let period = (config.idle_timeout() / 4).clamp(Duration::from_secs(1), Duration::from_secs(60));
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            loop {
                tick.tick().await;
                let n = state.sweep_idle(Instant::now()).await;
                if n > 0 {
                    tracing::info!(count = n, "ended idle sessions");
                }
            }
        })
    };

    let listener = tokio::net::TcpListener::bind(config.listen).await?;
    let addr = listener.local_addr()?;
    println!("listening on {addr}");
    tracing::info!(%addr, "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    sweeper.abort();
    Ok(())
}
