//! HTTP backend for collecting pairwise preferences on live generations.
//!
//! `GET /api/pair` samples a prompt and two clips from the loaded checkpoint,
//! `POST /api/preference` resolves a pair exactly once and appends the choice
//! to the preference store, and `GET /api/stats` reports counters.

pub mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use musicrl_core::net::ParamSet;
use musicrl_core::policy::{DEFAULT_TEMPERATURE, generate_batch};
use musicrl_core::preferences::{Choice, PreferenceRecord, Source};
use musicrl_core::rng::stream;
use musicrl_core::symbolic::{Clip, NoteEvent, Prompt, to_note_events};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use store::PreferenceStore;

pub const DEFAULT_PORT: u16 = 8734;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("io error at {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("corrupt preference store: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Core(#[from] musicrl_core::Error),
}

/// A clip as sent to clients: token ids plus a note-event rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPayload {
    pub tokens: Vec<u32>,
    pub events: Vec<NoteEvent>,
}

impl ClipPayload {
    fn of(clip: &Clip) -> Self {
        ClipPayload {
            tokens: clip.ids(),
            events: to_note_events(clip),
        }
    }
}

/// One served comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSession {
    pub pair_id: String,
    /// Prompt text, the only instruction shown to the listener.
    pub prompt: String,
    pub prompt_fields: Prompt,
    pub clip_a: ClipPayload,
    pub clip_b: ClipPayload,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub resolved: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceRequest {
    pub pair_id: String,
    pub choice: Choice,
    pub listened_a: bool,
    pub listened_b: bool,
}

/// Served count is per process; the others count every record in the store,
/// including those from earlier runs. All are monotone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub pairs_served: u64,
    pub resolved: u64,
    pub skipped: u64,
    /// Records excluded from training (skips or a clip not listened to).
    pub filtered_for_training: u64,
}

#[derive(Debug, Deserialize)]
struct PairQuery {
    prompt: Option<String>,
}

#[derive(Debug)]
struct PairEntry {
    prompt: Prompt,
    clip_a: Vec<u32>,
    clip_b: Vec<u32>,
    resolved: bool,
}

#[derive(Debug)]
pub struct AppState {
    model: RwLock<Option<Arc<ParamSet>>>,
    pool: Vec<Prompt>,
    pairs: Mutex<HashMap<String, PairEntry>>,
    store: PreferenceStore,
    served: AtomicU64,
    seed: u64,
}

impl AppState {
    /// `model` may be `None` until a checkpoint finishes loading; pair
    /// requests get 503 meanwhile.
    pub fn new(
        model: Option<ParamSet>,
        pool: Vec<Prompt>,
        store: PreferenceStore,
        seed: u64,
    ) -> Result<Self, ServiceError> {
        if pool.is_empty() {
            return Err(musicrl_core::Error::EmptyDataset("prompt pool".into()).into());
        }
        Ok(AppState {
            model: RwLock::new(model.map(Arc::new)),
            pool,
            pairs: Mutex::new(HashMap::new()),
            store,
            served: AtomicU64::new(0),
            seed,
        })
    }

    pub fn set_model(&self, params: ParamSet) {
        *self.model.write().expect("model lock poisoned") = Some(Arc::new(params));
    }

    pub fn store(&self) -> &PreferenceStore {
        &self.store
    }

    pub fn stats(&self) -> Stats {
        let records = self.store.snapshot();
        let skipped = records.iter().filter(|r| r.choice == Choice::Skip).count() as u64;
        let filtered = records.iter().filter(|r| !r.is_trainable()).count() as u64;
        Stats {
            pairs_served: self.served.load(Ordering::SeqCst),
            resolved: records.len() as u64,
            skipped,
            filtered_for_training: filtered,
        }
    }

    fn new_pair(
        &self,
        params: &ParamSet,
        requested: Option<Prompt>,
    ) -> Result<PairSession, ServiceError> {
        let n = self.served.fetch_add(1, Ordering::SeqCst);
        let prompt = requested.unwrap_or_else(|| {
            self.pool[stream(self.seed, &[0xA17, n, 0]).random_range(0..self.pool.len())]
        });
        let mut rngs = [
            stream(self.seed, &[0xA17, n, 1]),
            stream(self.seed, &[0xA17, n, 2]),
        ];
        let clips = generate_batch(params, &[prompt, prompt], DEFAULT_TEMPERATURE, &mut rngs)?;
        let session = PairSession {
            pair_id: uuid::Uuid::new_v4().to_string(),
            prompt: prompt.text(),
            prompt_fields: prompt,
            clip_a: ClipPayload::of(&clips[0].clip),
            clip_b: ClipPayload::of(&clips[1].clip),
            created_at: now_ms(),
            resolved: false,
        };
        self.pairs.lock().expect("pair table poisoned").insert(
            session.pair_id.clone(),
            PairEntry {
                prompt,
                clip_a: session.clip_a.tokens.clone(),
                clip_b: session.clip_b.tokens.clone(),
                resolved: false,
            },
        );
        Ok(session)
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn error(status: StatusCode, kind: &str, message: impl Into<String>) -> Response {
    (
        status,
        Json(serde_json::json!({ "error": kind, "message": message.into() })),
    )
        .into_response()
}

async fn get_pair(State(state): State<Arc<AppState>>, Query(q): Query<PairQuery>) -> Response {
    let Some(params) = state.model.read().expect("model lock poisoned").clone() else {
        return error(
            StatusCode::SERVICE_UNAVAILABLE,
            "not_ready",
            "checkpoint not loaded",
        );
    };
    let requested = match q.prompt.as_deref() {
        None => None,
        Some(text) => match text
            .parse::<Prompt>()
            .or_else(|_| Prompt::parse_structured(text))
        {
            Ok(p) => Some(p),
            Err(e) => {
                return error(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "bad_prompt",
                    e.to_string(),
                );
            }
        },
    };
    let worker = Arc::clone(&state);
    match tokio::task::spawn_blocking(move || worker.new_pair(&params, requested)).await {
        Ok(Ok(session)) => Json(session).into_response(),
        Ok(Err(e)) => error(
            StatusCode::INTERNAL_SERVER_ERROR,
            "generation",
            e.to_string(),
        ),
        Err(e) => error(
            StatusCode::INTERNAL_SERVER_ERROR,
            "generation",
            e.to_string(),
        ),
    }
}

async fn post_preference(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: PreferenceRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            return error(
                StatusCode::UNPROCESSABLE_ENTITY,
                "malformed_body",
                e.to_string(),
            );
        }
    };
    let record = {
        let mut pairs = state.pairs.lock().expect("pair table poisoned");
        let Some(entry) = pairs.get_mut(&req.pair_id) else {
            return error(StatusCode::NOT_FOUND, "unknown_pair", req.pair_id);
        };
        if entry.resolved {
            return error(StatusCode::CONFLICT, "already_resolved", req.pair_id);
        }
        entry.resolved = true;
        PreferenceRecord {
            pair_id: req.pair_id.clone(),
            prompt: entry.prompt,
            clip_a: entry.clip_a.clone(),
            clip_b: entry.clip_b.clone(),
            choice: req.choice,
            listened_a: req.listened_a,
            listened_b: req.listened_b,
            source: Source::Ui,
            timestamp: now_ms(),
        }
    };
    let worker = Arc::clone(&state);
    let appended = tokio::task::spawn_blocking(move || worker.store.append(record)).await;
    match appended {
        Ok(Ok(())) => StatusCode::NO_CONTENT.into_response(),
        failure => {
            // Not durable, so the pair stays open for a retry.
            if let Some(entry) = state
                .pairs
                .lock()
                .expect("pair table poisoned")
                .get_mut(&req.pair_id)
            {
                entry.resolved = false;
            }
            let msg = match failure {
                Ok(Err(e)) => e.to_string(),
                Err(e) => e.to_string(),
                Ok(Ok(())) => unreachable!(),
            };
            error(StatusCode::INTERNAL_SERVER_ERROR, "store", msg)
        }
    }
}

async fn get_stats(State(state): State<Arc<AppState>>) -> Json<Stats> {
    Json(state.stats())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/pair", get(get_pair))
        .route("/api/preference", post(post_preference))
        .route("/api/stats", get(get_stats))
        .with_state(state)
}

/// Serve until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
