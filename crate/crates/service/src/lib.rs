//! Read-only control service: model info, override predictions and live
//! governed sessions over WebSocket.
//!
//! Routes are mounted under both `/api` and `/api/v1`:
//!
//! * `GET  /model`   model dimensions and config echo (503 without a checkpoint)
//! * `POST /predict` edited-latent prediction for an observation or a session
//! * `GET  /session` WebSocket; commands `reset`, `step`, `auto`

pub mod protocol;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use acvae::env::{DiscreteAction, IMAGE_SIDE};
use acvae::governance::{predict_with_override, ActionChoice, Frame, GovernedEpisode, Override};
use acvae::{Checkpoint, Error};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Json, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use tokio::sync::Mutex;
use tower_http::cors::CorsLayer;

use protocol::*;

/// Steps per second ceiling for `auto`.
pub const AUTO_RATE: u32 = 30;

/// One governed episode owned by a WebSocket connection.
pub struct Session {
    episode: Option<GovernedEpisode>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    checkpoint: Option<Checkpoint>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    auto_interval: Duration,
}

impl AppState {
    pub fn new(checkpoint: Option<Checkpoint>) -> Self {
        AppState {
            inner: Arc::new(Inner {
                checkpoint,
                sessions: Mutex::new(HashMap::new()),
                next_id: AtomicU64::new(1),
                auto_interval: Duration::from_secs(1) / AUTO_RATE,
            }),
        }
    }

    fn checkpoint(&self) -> Result<&Checkpoint, ApiError> {
        self.inner
            .checkpoint
            .as_ref()
            .ok_or_else(|| ApiError(StatusCode::SERVICE_UNAVAILABLE, ErrorBody::new("no checkpoint loaded", None)))
    }
}

struct ApiError(StatusCode, ErrorBody);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

fn bad_request(msg: impl Into<String>, field: &str) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, ErrorBody::new(msg, Some(field)))
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/model", get(model_info))
        .route("/predict", post(predict))
        .route("/session", get(session_ws));
    Router::new()
        .nest("/api", api.clone())
        .nest("/api/v1", api)
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds and serves until the process ends.
pub async fn serve(addr: SocketAddr, checkpoint: Option<Checkpoint>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(checkpoint))).await
}

pub fn model_info_of(ck: &Checkpoint) -> ModelInfo {
    let n = ck.model.latent_dim();
    let m = ck.model.action_dim();
    ModelInfo {
        v: PROTOCOL_VERSION,
        n,
        m,
        dims: (1..=n).map(|dim| DimInfo { dim, mapped: dim <= m }).collect(),
        step_count: ck.step_count,
        seed: ck.seed,
        frame_width: IMAGE_SIDE,
        frame_height: IMAGE_SIDE,
        actions: DiscreteAction::ALL.to_vec(),
        config: serde_json::to_value(&ck.config).unwrap_or(serde_json::Value::Null),
    }
}

async fn model_info(State(state): State<AppState>) -> Result<Json<ModelInfo>, ApiError> {
    Ok(Json(model_info_of(state.checkpoint()?)))
}

async fn predict(
    State(state): State<AppState>,
    body: Result<Json<PredictRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<PredictResponse>, ApiError> {
    let Json(req) = body.map_err(|e| bad_request(e.body_text(), "body"))?;
    let ck = state.checkpoint()?;
    let overrides = parse_overrides(&req.overrides).map_err(|e| bad_request(e, "overrides"))?;
    let obs = match (&req.session_id, &req.observation) {
        (Some(_), Some(_)) => return Err(bad_request("give either session_id or observation", "session_id")),
        (None, None) => return Err(bad_request("session_id or observation is required", "observation")),
        (None, Some(frame)) => frame.to_observation().map_err(|e| bad_request(e.to_string(), "observation"))?,
        (Some(id), None) => {
            let session = state.inner.sessions.lock().await.get(id).cloned();
            let session =
                session.ok_or_else(|| ApiError(StatusCode::NOT_FOUND, ErrorBody::new("unknown session", Some("session_id"))))?;
            let guard = session.lock().await;
            match &guard.episode {
                Some(ep) => ep.observation().clone(),
                None => return Err(bad_request("session has not been reset", "session_id")),
            }
        }
    };
    let choice = match req.action {
        Some(a) => ActionChoice::Given(a),
        None => ActionChoice::Sample(req.seed),
    };
    let pred = predict_with_override(&ck.model, &obs, &overrides, choice).map_err(|e| match e {
        Error::Usage(msg) => bad_request(msg, "overrides"),
        other => ApiError(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody::new(other.to_string(), None)),
    })?;
    Ok(Json(PredictResponse {
        v: PROTOCOL_VERSION,
        predicted_image: pred.frame(),
        policy: pred.policy,
        value: pred.value,
        action: pred.action,
        mu: pred.mu,
    }))
}

async fn session_ws(State(state): State<AppState>, ws: WebSocketUpgrade) -> Result<Response, ApiError> {
    state.checkpoint()?;
    Ok(ws.on_upgrade(move |socket| run_session(state, socket)))
}

async fn send(socket: &mut WebSocket, msg: &ServerMsg) -> bool {
    let text = serde_json::to_string(msg).expect("server messages serialize");
    socket.send(Message::Text(text.into())).await.is_ok()
}

/// Outcome of one client command.
enum Flow {
    Continue,
    Close,
}

async fn run_session(state: AppState, mut socket: WebSocket) {
    let id = format!("s{}", state.inner.next_id.fetch_add(1, Ordering::Relaxed));
    let session = Arc::new(Mutex::new(Session { episode: None }));
    state.inner.sessions.lock().await.insert(id.clone(), session.clone());
    if send(&mut socket, &ServerMsg::Hello { v: PROTOCOL_VERSION, session_id: id.clone() }).await {
        while let Some(Ok(msg)) = socket.recv().await {
            let text = match msg {
                Message::Text(t) => t.to_string(),
                Message::Close(_) => break,
                Message::Ping(_) | Message::Pong(_) => continue,
                Message::Binary(_) => {
                    send(&mut socket, &ServerMsg::error("binary messages are not supported")).await;
                    break;
                }
            };
            match handle(&state, &session, &mut socket, &text).await {
                Flow::Continue => {}
                Flow::Close => break,
            }
        }
    }
    let _ = socket.send(Message::Close(None)).await;
    state.inner.sessions.lock().await.remove(&id);
}

async fn handle(state: &AppState, session: &Arc<Mutex<Session>>, socket: &mut WebSocket, text: &str) -> Flow {
    let ck = state.inner.checkpoint.as_ref().expect("checked at upgrade");
    let msg: ClientMsg = match serde_json::from_str(text) {
        Ok(m) => m,
        Err(e) => {
            send(socket, &ServerMsg::error(format!("malformed message: {e}"))).await;
            return Flow::Close;
        }
    };
    let mut guard = session.lock().await;
    match msg {
        ClientMsg::Reset { seed } => {
            let ep = GovernedEpisode::new(ck.config.env, seed);
            let reply = ServerMsg::Reset {
                v: PROTOCOL_VERSION,
                seed,
                frame: Frame::from_observation(ep.observation()),
                step_index: 0,
            };
            guard.episode = Some(ep);
            flow(send(socket, &reply).await)
        }
        ClientMsg::Step { overrides, action } => {
            let overrides = match parse_overrides(&overrides) {
                Ok(o) => o,
                Err(e) => return flow(send(socket, &ServerMsg::error(e)).await),
            };
            let reply = step_once(ck, &mut guard, &overrides, action);
            flow(send(socket, &reply).await)
        }
        ClientMsg::Auto { steps, overrides } => {
            let overrides = match parse_overrides(&overrides) {
                Ok(o) => o,
                Err(e) => return flow(send(socket, &ServerMsg::error(e)).await),
            };
            let mut ticker = tokio::time::interval(state.inner.auto_interval);
            for _ in 0..steps {
                ticker.tick().await;
                let reply = step_once(ck, &mut guard, &overrides, None);
                let stop = !matches!(reply, ServerMsg::Step { done: false, .. });
                if !send(socket, &reply).await {
                    return Flow::Close;
                }
                if stop {
                    break;
                }
            }
            Flow::Continue
        }
    }
}

fn flow(sent: bool) -> Flow {
    if sent {
        Flow::Continue
    } else {
        Flow::Close
    }
}

fn step_once(ck: &Checkpoint, session: &mut Session, overrides: &[Override], action: Option<DiscreteAction>) -> ServerMsg {
    let Some(ep) = session.episode.as_mut() else {
        return ServerMsg::error("step before reset");
    };
    match ep.step(&ck.model, overrides, action) {
        Ok(record) => ServerMsg::from_record(record),
        Err(e) => ServerMsg::error(e.to_string()),
    }
}
