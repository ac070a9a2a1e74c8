//! HTTP routes for the chat service.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use empathy_core::decoder::DecodingConfig;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use crate::error::ServiceError;
use crate::session::{exchange, ChatReply, ChatSession, DecodingOverrides, Responder};
use crate::store::SessionStore;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
    pub responder: Arc<dyn Responder>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    #[serde(default)]
    pub decoding: DecodingOverrides,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub id: String,
    pub decoding: DecodingConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MessageRequest {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint: String,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/messages", post(post_message))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

fn parse<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T, ServiceError> {
    serde_json::from_slice(bytes).map_err(|e| ServiceError::InvalidRequest(format!("invalid request body: {e}")))
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        checkpoint: state.responder.checkpoint().to_string(),
    })
}

async fn create_session(
    State(state): State<AppState>,
    bytes: Bytes,
) -> Result<(StatusCode, Json<CreateSessionResponse>), ServiceError> {
    let request: CreateSessionRequest = if bytes.iter().all(u8::is_ascii_whitespace) {
        CreateSessionRequest::default()
    } else {
        parse(&bytes)?
    };
    let session = state.store.create(&request.decoding)?;
    Ok((
        StatusCode::CREATED,
        Json(CreateSessionResponse {
            id: session.id,
            decoding: session.decoding,
        }),
    ))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<ChatSession>, ServiceError> {
    let handle = state.store.get(&id)?;
    let session = handle.lock().await.clone();
    Ok(Json(session))
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ServiceError> {
    state.store.delete(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn post_message(
    State(state): State<AppState>,
    Path(id): Path<String>,
    bytes: Bytes,
) -> Result<Json<ChatReply>, ServiceError> {
    let handle = state.store.get(&id)?;
    let request: MessageRequest = parse(&bytes)?;
    // Held until the reply is recorded, so posts to one session run in arrival order.
    let mut session = handle.lock_owned().await;
    let start = session.turns.len();
    let responder = state.responder.clone();
    let (session, reply) = tokio::task::spawn_blocking(move || {
        let reply = exchange(responder.as_ref(), &mut session, &request.text);
        (session, reply)
    })
    .await
    .map_err(|e| ServiceError::Generation(e.to_string()))?;
    let reply = reply?;
    state.store.record_turns(&session, start)?;
    Ok(Json(reply))
}
