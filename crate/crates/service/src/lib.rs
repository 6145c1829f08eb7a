//! HTTP JSON API for live interviews.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/api/sessions` | `{k?}` → first question |
//! | POST | `/api/sessions/{id}/answer` | `{rating: 0..5}` → next question or recommendations |
//! | GET | `/api/sessions/{id}` | session view with history |
//! | GET | `/api/sessions/{id}/recommendations?n=10` | top-n unseen movies |
//! | GET | `/api/sessions/{id}/q-values` | raw q-values for the current state |
//! | GET | `/api/health` | `{status, model, action_space_size}` |

mod session;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use coldstart_core::ModelBundle;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub use session::{replay, AskedQuestion, Recommendation, Session, SessionStore};

pub const DEFAULT_QUESTIONS: usize = 3;
pub const DEFAULT_RECOMMENDATIONS: usize = 10;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub idle_timeout: Duration,
    pub journal: Option<PathBuf>,
    /// Allowed browser origins; empty allows any.
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            idle_timeout: Duration::from_secs(3600),
            journal: None,
            cors_origins: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    pub fn bad_request(m: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, m)
    }

    pub fn not_found(m: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, m)
    }

    pub fn conflict(m: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, m)
    }

    pub fn internal(e: impl ToString) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({})", self.message, self.status)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

pub struct AppState {
    pub bundle: Option<Arc<ModelBundle>>,
    pub sessions: SessionStore,
}

impl AppState {
    pub fn new(bundle: Option<ModelBundle>, config: &ServiceConfig) -> std::io::Result<Self> {
        let sessions = match &config.journal {
            Some(path) => SessionStore::with_journal(config.idle_timeout, path, bundle.as_ref())?,
            None => SessionStore::new(config.idle_timeout),
        };
        Ok(AppState {
            bundle: bundle.map(Arc::new),
            sessions,
        })
    }

    fn bundle(&self) -> Result<&ModelBundle, ApiError> {
        self.bundle
            .as_deref()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model bundle loaded"))
    }
}

#[derive(Debug, Serialize)]
struct QuestionView {
    movie_id: u32,
    title: String,
    genres: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Progress {
    asked: usize,
    total: usize,
}

#[derive(Debug, Serialize)]
struct HistoryRow {
    turn: usize,
    movie_id: u32,
    title: String,
    genres: Vec<String>,
    rating: u8,
}

#[derive(Debug, Serialize)]
struct SessionView {
    session_id: String,
    finished: bool,
    progress: Progress,
    #[serde(skip_serializing_if = "Option::is_none")]
    question: Option<QuestionView>,
    history: Vec<HistoryRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    recommendations: Option<Vec<Recommendation>>,
}

fn view(bundle: &ModelBundle, s: &Session, with_recommendations: bool) -> Result<SessionView, ApiError> {
    let entry = |movie: u32| &bundle.catalog[movie as usize];
    Ok(SessionView {
        session_id: s.id.clone(),
        finished: s.finished,
        progress: Progress {
            asked: s.answered(),
            total: s.k_target,
        },
        question: s.pending().map(|q| QuestionView {
            movie_id: entry(q.movie).movie_id,
            title: entry(q.movie).title.clone(),
            genres: entry(q.movie).genres.clone(),
        }),
        history: s
            .asked
            .iter()
            .filter_map(|q| q.answer.map(|a| (q, a)))
            .enumerate()
            .map(|(i, (q, rating))| HistoryRow {
                turn: i + 1,
                movie_id: entry(q.movie).movie_id,
                title: entry(q.movie).title.clone(),
                genres: entry(q.movie).genres.clone(),
                rating,
            })
            .collect(),
        recommendations: if with_recommendations && s.finished {
            Some(s.recommendations(bundle, DEFAULT_RECOMMENDATIONS)?)
        } else {
            None
        },
    })
}

fn parse_body<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    k: Option<i64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnswerRequest {
    rating: Option<i64>,
}

#[derive(Debug, Deserialize)]
struct RecommendationQuery {
    n: Option<usize>,
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let bundle = app.bundle()?;
    let req: CreateRequest = parse_body(&body)?;
    let k = req.k.unwrap_or(DEFAULT_QUESTIONS as i64);
    if k < 1 {
        return Err(ApiError::bad_request(format!("k must be at least 1, got {k}")));
    }
    let handle = app.sessions.create(bundle, k as usize)?;
    let s = handle.lock().expect("session lock");
    Ok((StatusCode::CREATED, Json(view(bundle, &s, false)?)).into_response())
}

async fn answer(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SessionView>, ApiError> {
    let bundle = app.bundle()?;
    let req: AnswerRequest = parse_body(&body)?;
    let rating = req.rating.ok_or_else(|| ApiError::bad_request("missing rating"))?;
    let handle = app.sessions.answer(bundle, &id, rating)?;
    let s = handle.lock().expect("session lock");
    Ok(Json(view(bundle, &s, true)?))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let bundle = app.bundle()?;
    let handle = app.sessions.get(&id)?;
    let s = handle.lock().expect("session lock");
    Ok(Json(view(bundle, &s, true)?))
}

async fn recommendations(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<RecommendationQuery>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let bundle = app.bundle()?;
    let handle = app.sessions.get(&id)?;
    let s = handle.lock().expect("session lock");
    let list = s.recommendations(bundle, q.n.unwrap_or(DEFAULT_RECOMMENDATIONS))?;
    Ok(Json(json!({ "session_id": s.id, "recommendations": list })))
}

async fn q_values(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let bundle = app.bundle()?;
    let handle = app.sessions.get(&id)?;
    let s = handle.lock().expect("session lock");
    let q = bundle.q_values(&s.state).map_err(ApiError::internal)?;
    let slots: Vec<_> = q
        .iter()
        .enumerate()
        .map(|(slot, value)| {
            let movie = bundle.action_space.movies()[slot];
            json!({
                "slot": slot,
                "movie_id": bundle.catalog[movie as usize].movie_id,
                "title": bundle.catalog[movie as usize].title,
                "asked": s.state.is_asked(slot),
                "q": value,
            })
        })
        .collect();
    Ok(Json(
        json!({ "session_id": s.id, "state": s.state.values(), "q_values": slots }),
    ))
}

async fn health(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(match &app.bundle {
        Some(b) => json!({
            "status": "ok",
            "model": b.kind.name(),
            "action_space_size": b.action_space.len(),
        }),
        None => json!({ "status": "no-model", "model": null, "action_space_size": 0 }),
    })
}

pub fn router(app: Arc<AppState>, config: &ServiceConfig) -> Router {
    let origins: Vec<HeaderValue> = config
        .cors_origins
        .iter()
        .filter_map(|o| HeaderValue::from_str(o).ok())
        .collect();
    let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    let cors = if origins.is_empty() {
        cors.allow_origin(Any)
    } else {
        cors.allow_origin(AllowOrigin::list(origins))
    };
    Router::new()
        .route("/api/health", get(health))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/answer", post(answer))
        .route("/api/sessions/{id}/recommendations", get(recommendations))
        .route("/api/sessions/{id}/q-values", get(q_values))
        .layer(cors)
        .with_state(app)
}

/// Serves until Ctrl-C, sweeping idle sessions once a minute.
pub async fn serve(addr: SocketAddr, bundle: Option<ModelBundle>, config: ServiceConfig) -> std::io::Result<()> {
    let app = Arc::new(AppState::new(bundle, &config)?);
    let sweeper = app.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let dropped = sweeper.sessions.sweep();
            if dropped > 0 {
                log::info!("expired {dropped} idle sessions");
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(app, &config))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
