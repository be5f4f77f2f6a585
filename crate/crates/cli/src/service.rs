//! Session service: HTTP endpoints plus a WebSocket stream over the same
//! session operations. Responses are pure functions of session state,
//! request and seed; the model is shared read-only.

use std::collections::HashMap;
use std::future::Future;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::SystemTime;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{Mutex, RwLock};
use usg_core::phantom::mix64;
use usg_core::{
    oracle_quality, render, suggest, Experience, GuidanceConfig, GuidanceError, GuidanceSuggestion, ModelError,
    PhantomConfig, PhantomError, ProbeState, QualityModel, Quat, UltrasoundFrame,
};

use crate::error::CliError;
use crate::manifest::sha256_hex;

pub const WS_SCHEMA: &str = "usg_ws_v1";
pub const MAX_SUGGEST_SAMPLES: usize = 100_000;

pub struct Session {
    pub id: String,
    pub phantom: PhantomConfig,
    pub state: ProbeState,
    pub frame: UltrasoundFrame,
    pub seed: u64,
    pub created_at: SystemTime,
}

pub struct AppState {
    pub model: Arc<QualityModel>,
    pub experience: Arc<Experience>,
    pub phantom: PhantomConfig,
    pub model_hash: String,
    pub default_seed: u64,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    created: AtomicU64,
}

impl AppState {
    pub fn new(
        model: QualityModel,
        experience: Experience,
        phantom: PhantomConfig,
        default_seed: u64,
    ) -> Result<Arc<Self>, CliError> {
        check_phantom(&model, &phantom).map_err(|e| CliError::Usage(e.message))?;
        Ok(Arc::new(Self {
            model_hash: sha256_hex(&model.to_bytes()),
            model: Arc::new(model),
            experience: Arc::new(experience),
            phantom,
            default_seed,
            sessions: RwLock::new(HashMap::new()),
            created: AtomicU64::new(0),
        }))
    }

    async fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions.read().await.get(id).cloned().ok_or_else(|| ApiError {
            status: StatusCode::NOT_FOUND,
            code: "session_not_found",
            message: format!("no session '{id}'"),
        })
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "bad_request",
            message: message.into(),
        }
    }

    fn unprocessable(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            code,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: message.into(),
        }
    }

    fn body(&self) -> serde_json::Value {
        json!({ "error": self.code, "message": self.message })
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}

impl From<PhantomError> for ApiError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::NegativeNormalForce(_) => ApiError::unprocessable("negative_normal_force", e.to_string()),
            PhantomError::InvalidState(_) | PhantomError::Quat(_) => {
                ApiError::unprocessable("invalid_state", e.to_string())
            }
            PhantomError::Config(_) | PhantomError::Schema { .. } | PhantomError::Parse(_) => {
                ApiError::unprocessable("invalid_phantom_config", e.to_string())
            }
            PhantomError::Io { .. } => ApiError::internal(e.to_string()),
        }
    }
}

impl From<GuidanceError> for ApiError {
    fn from(e: GuidanceError) -> Self {
        match e {
            GuidanceError::Infeasible { .. } | GuidanceError::EmptyExperience(_) => {
                ApiError::unprocessable("infeasible", e.to_string())
            }
            GuidanceError::Config(_) => ApiError::unprocessable("invalid_query", e.to_string()),
            GuidanceError::Phantom(p) => p.into(),
            GuidanceError::Model(m) => m.into(),
        }
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        ApiError::internal(e.to_string())
    }
}

fn check_phantom(model: &QualityModel, phantom: &PhantomConfig) -> Result<(), ApiError> {
    phantom.validate()?;
    if phantom.image != model.config.image {
        return Err(ApiError::unprocessable(
            "image_size_mismatch",
            format!(
                "phantom renders {:?} but the model expects {:?}",
                phantom.image, model.config.image
            ),
        ));
    }
    Ok(())
}

/// Render seed for a state in a session: the same state always gives the same frame.
pub fn state_frame_seed(session_seed: u64, state: &ProbeState) -> u64 {
    let mut h = mix64(session_seed);
    for v in state.pose().to_array().iter().chain(state.wrench().iter()) {
        h = mix64(h ^ v.to_bits());
    }
    h
}

pub fn encode_frame(frame: &UltrasoundFrame) -> String {
    let bytes: Vec<u8> = frame.pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_frame(text: &str) -> Option<Vec<f32>> {
    let bytes = base64::engine::general_purpose::STANDARD.decode(text).ok()?;
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    )
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    phantom_config: Option<PhantomConfig>,
    seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct StateRequest {
    pub pose: [f64; 4],
    pub wrench: [f64; 6],
}

#[derive(Debug, Clone, Serialize)]
pub struct Observation {
    pub frame: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub render_seed: u64,
    pub quality: f64,
    pub oracle: OracleView,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleView {
    pub label: u8,
    pub score: f64,
}

#[derive(Debug, Deserialize)]
pub struct SuggestQuery {
    pub n: Option<usize>,
    pub seed: Option<u64>,
}

fn parse_state(req: &StateRequest) -> Result<ProbeState, ApiError> {
    let [w, x, y, z] = req.pose;
    let state = ProbeState::new(Quat::new(w, x, y, z), req.wrench)?;
    state.require_contact()?;
    Ok(state)
}

/// Moves the session to `state`, rendering and scoring the new frame.
fn apply_state(model: &QualityModel, session: &mut Session, state: ProbeState) -> Result<Observation, ApiError> {
    let seed = state_frame_seed(session.seed, &state);
    let frame = render(&state, &session.phantom, seed)?;
    let quality = model.forward(&frame, &state)?.confidence as f64;
    let oracle = oracle_quality(&state, &session.phantom);
    let obs = Observation {
        frame: encode_frame(&frame),
        height: frame.size.height,
        width: frame.size.width,
        channels: frame.size.channels,
        render_seed: seed,
        quality,
        oracle: OracleView {
            label: oracle.label,
            score: oracle.score,
        },
    };
    // only commit once everything succeeded
    session.state = state;
    session.frame = frame;
    Ok(obs)
}

fn suggest_for(
    model: &QualityModel,
    experience: &Experience,
    session: &Session,
    query: &SuggestQuery,
) -> Result<GuidanceSuggestion, ApiError> {
    let n = query.n.unwrap_or(GuidanceConfig::default().n_samples);
    if n > MAX_SUGGEST_SAMPLES {
        return Err(ApiError::unprocessable(
            "invalid_query",
            format!("n = {n} exceeds {MAX_SUGGEST_SAMPLES}"),
        ));
    }
    let cfg = GuidanceConfig {
        n_samples: n,
        seed: query.seed.unwrap_or(session.seed),
        ..GuidanceConfig::default()
    };
    Ok(suggest(model, experience, &session.frame, &session.state, &cfg)?)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: axum::body::Bytes,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let req: CreateRequest = if body.iter().all(u8::is_ascii_whitespace) {
        CreateRequest {
            phantom_config: None,
            seed: None,
        }
    } else {
        parse_json(&body)?
    };
    let phantom = req.phantom_config.unwrap_or_else(|| app.phantom.clone());
    check_phantom(&app.model, &phantom)?;
    let seed = req.seed.unwrap_or(app.default_seed);
    let n = app.created.fetch_add(1, Ordering::Relaxed);
    let id = format!("s{n}-{:012x}", mix64(n ^ 0x5e55_1011) & 0xffff_ffff_ffff);
    let state = ProbeState::upright(0.0);
    let frame = render(&state, &phantom, state_frame_seed(seed, &state))?;
    let session = Session {
        id: id.clone(),
        phantom,
        state,
        frame,
        seed,
        created_at: SystemTime::now(),
    };
    app.sessions
        .write()
        .await
        .insert(id.clone(), Arc::new(Mutex::new(session)));
    tracing::info!(%id, seed, "session created");
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id, "seed": seed }))))
}

async fn put_state(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> Result<Json<Observation>, ApiError> {
    let session = app.session(&id).await?;
    let state = parse_state(&parse_json(&body)?)?;
    let mut guard = session.lock_owned().await;
    let model = app.model.clone();
    let obs = blocking(move || apply_state(&model, &mut guard, state)).await?;
    Ok(Json(obs))
}

async fn get_suggest(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    query: Result<Query<SuggestQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<GuidanceSuggestion>, ApiError> {
    let Query(query) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let session = app.session(&id).await?;
    let guard = session.lock_owned().await;
    let (model, exp) = (app.model.clone(), app.experience.clone());
    let s = blocking(move || suggest_for(&model, &exp, &guard, &query)).await?;
    Ok(Json(s))
}

async fn healthz(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "model_hash": app.model_hash,
        "sessions": app.sessions.read().await.len(),
    }))
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum WsIn {
    State {
        schema: String,
        pose: [f64; 4],
        wrench: [f64; 6],
        suggest: Option<WsSuggest>,
    },
}

#[derive(Debug, Deserialize)]
struct WsSuggest {
    n: Option<usize>,
    seed: Option<u64>,
}

fn ws_error(e: &ApiError) -> String {
    json!({ "schema": WS_SCHEMA, "type": "error", "error": e.code, "message": e.message }).to_string()
}

async fn ws_handle(app: &AppState, session: &Arc<Mutex<Session>>, text: &str) -> Result<String, ApiError> {
    let WsIn::State {
        schema,
        pose,
        wrench,
        suggest,
    } = serde_json::from_str(text).map_err(|e| ApiError::bad_request(format!("malformed message: {e}")))?;
    if schema != WS_SCHEMA {
        return Err(ApiError::bad_request(format!(
            "schema '{schema}' is not supported (expected '{WS_SCHEMA}')"
        )));
    }
    let state = parse_state(&StateRequest { pose, wrench })?;
    let mut guard = session.clone().lock_owned().await;
    let (model, exp) = (app.model.clone(), app.experience.clone());
    let (obs, suggestion) = blocking(move || {
        let obs = apply_state(&model, &mut guard, state)?;
        let suggestion = match suggest {
            Some(q) => Some(suggest_for(
                &model,
                &exp,
                &guard,
                &SuggestQuery { n: q.n, seed: q.seed },
            )?),
            None => None,
        };
        Ok((obs, suggestion))
    })
    .await?;
    let mut out = serde_json::to_value(&obs).map_err(|e| ApiError::internal(e.to_string()))?;
    let map = out.as_object_mut().expect("observation is an object");
    map.insert("schema".into(), json!(WS_SCHEMA));
    map.insert("type".into(), json!("frame"));
    if let Some(s) = suggestion {
        map.insert("suggestion".into(), serde_json::to_value(s).unwrap_or_default());
    }
    Ok(out.to_string())
}

async fn ws_loop(mut socket: WebSocket, app: Arc<AppState>, session: Arc<Mutex<Session>>) {
    while let Some(Ok(msg)) = socket.recv().await {
        let reply = match msg {
            Message::Text(t) => match ws_handle(&app, &session, t.as_str()).await {
                Ok(r) => r,
                Err(e) => ws_error(&e),
            },
            Message::Binary(_) => ws_error(&ApiError::bad_request("binary messages are not supported")),
            Message::Close(_) => break,
            Message::Ping(_) | Message::Pong(_) => continue,
        };
        if socket.send(Message::Text(reply.into())).await.is_err() {
            break;
        }
    }
}

async fn stream(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let session = app.session(&id).await?;
    Ok(ws.on_upgrade(move |socket| ws_loop(socket, app, session)))
}

async fn not_found() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        code: "not_found",
        message: "no such endpoint".into(),
    }
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/v1/session", post(create_session))
        .route("/api/v1/session/{id}/state", put(put_state))
        .route("/api/v1/session/{id}/suggest", get(get_suggest))
        .route("/api/v1/session/{id}/stream", get(stream))
        .route("/api/v1/healthz", get(healthz))
        .fallback(not_found)
        .with_state(app)
}

pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(app))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down");
}
