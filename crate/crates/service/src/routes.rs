use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use coral_core::generate::ChatTurn;
use coral_core::{chat_respond, DecodeConfig, Strategy};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::state::AppState;
use crate::{ServiceError, DISCLAIMER};

/// Upper bound on `max_new_tokens` for any single reply.
pub const MAX_NEW_TOKENS_CAP: usize = 256;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeOverrides {
    pub strategy: Option<Strategy>,
    pub top_k: Option<usize>,
    pub temperature: Option<f64>,
    pub max_new_tokens: Option<usize>,
    pub seed: Option<u64>,
}

impl DecodeOverrides {
    pub fn apply(&self, base: &DecodeConfig) -> DecodeConfig {
        DecodeConfig {
            strategy: self.strategy.unwrap_or(base.strategy),
            top_k: self.top_k.unwrap_or(base.top_k),
            temperature: self.temperature.unwrap_or(base.temperature),
            max_new_tokens: self.max_new_tokens.unwrap_or(base.max_new_tokens),
            seed: self.seed.unwrap_or(base.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRequest {
    pub text: String,
    #[serde(default)]
    pub decode: Option<DecodeOverrides>,
}

struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str) -> Self {
        Self { status, code, detail: None }
    }

    fn detail(mut self, detail: impl ToString) -> Self {
        self.detail = Some(detail.to_string());
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = match self.detail {
            Some(d) => json!({ "error": self.code, "detail": d }),
            None => json!({ "error": self.code }),
        };
        (self.status, Json(body)).into_response()
    }
}

fn no_such_session() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no_such_session")
}

fn model_not_loaded() -> ApiError {
    ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded")
}

/// Builds the application. `cors_origins` lists the browser origins that
/// may call the API; an empty list adds no CORS headers.
pub fn router(state: AppState, cors_origins: &[String]) -> Result<Router, ServiceError> {
    let app = Router::new()
        .route("/healthz", get(health))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/messages", post(post_message))
        .route("/v1/sessions/{id}/history", get(history))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found") })
        .method_not_allowed_fallback(|| async { ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed") })
        .with_state(state);
    if cors_origins.is_empty() {
        return Ok(app);
    }
    let origins = cors_origins
        .iter()
        .map(|o| HeaderValue::from_str(o).map_err(|_| ServiceError::Config(format!("invalid CORS origin {o:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::list(origins))
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Ok(app.layer(cors))
}

async fn health(State(state): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let model = state.model().ok_or_else(model_not_loaded)?;
    let c = model.weights.config();
    Ok(Json(json!({
        "status": "ok",
        "model": {
            "n_layers": c.n_layers,
            "n_heads": c.n_heads,
            "d_model": c.d_model,
            "d_ff": c.d_ff,
            "vocab_size": c.vocab_size,
            "max_seq_len": c.max_seq_len,
            "params": c.count_params(),
        }
    })))
}

async fn create_session(State(state): State<AppState>) -> Result<impl IntoResponse, ApiError> {
    let id = state
        .create_session()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "capacity"))?;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))))
}

async fn history(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<serde_json::Value>, ApiError> {
    let entry = state.session(&id).ok_or_else(no_such_session)?;
    let turns: Vec<ChatTurn> = entry.chat.lock().await.turns.clone();
    Ok(Json(json!({ "turns": turns })))
}

async fn post_message(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<serde_json::Value>, ApiError> {
    let request: MessageRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_body").detail(e))?;
    let entry = state.session(&id).ok_or_else(no_such_session)?;
    if request.text.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty_text"));
    }
    let model = state.model().ok_or_else(model_not_loaded)?;
    let decode = request
        .decode
        .unwrap_or_default()
        .apply(&state.limits().decode);
    let invalid_decode = |e: String| ApiError::new(StatusCode::BAD_REQUEST, "invalid_decode").detail(e);
    if decode.max_new_tokens > MAX_NEW_TOKENS_CAP {
        return Err(invalid_decode(format!(
            "max_new_tokens {} exceeds the cap of {MAX_NEW_TOKENS_CAP}",
            decode.max_new_tokens
        )));
    }
    decode
        .validate(model.weights.config().vocab_size)
        .map_err(|e| invalid_decode(e.to_string()))?;

    // Held across generation so one session's requests run one at a time.
    let mut guard = entry.chat.clone().lock_owned().await;
    let mut session = guard.clone();
    let text = request.text;
    let worker = tokio::task::spawn_blocking(move || {
        let reply = chat_respond(&mut session, &text, &model.weights, &model.vocab, &decode);
        (session, reply)
    });
    let (session, reply) = worker.await.map_err(|e| {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "generation_failed").detail(e)
    })?;
    let reply = reply.map_err(|e| {
        tracing::warn!(session = %id, "generation failed: {e}");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "generation_failed").detail(e)
    })?;
    *guard = session;
    drop(guard);
    entry.touch();
    state.record_context(&id, &reply.context_ids);
    Ok(Json(json!({
        "reply": reply.text,
        "turn_index": reply.turn_index,
        "disclaimer": DISCLAIMER,
    })))
}
