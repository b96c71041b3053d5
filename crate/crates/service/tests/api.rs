use std::collections::HashSet;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use coral_core::{Checkpoint, DecodeConfig, DecoderWeights, ModelConfig, TrainConfig, Vocabulary};
use coral_service::{router, AppState, LoadedModel, ServiceError, SessionLimits, DISCLAIMER};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn byte_model(seed: u64) -> LoadedModel {
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 258,
        max_seq_len: 64,
        dropout_rate: 0.0,
    };
    LoadedModel::new(DecoderWeights::init(cfg, seed).unwrap(), Vocabulary::bytes_only())
}

fn limits() -> SessionLimits {
    SessionLimits {
        decode: DecodeConfig {
            max_new_tokens: 8,
            ..DecodeConfig::default()
        },
        ..SessionLimits::default()
    }
}

fn loaded_app(limits: SessionLimits) -> (AppState, Router) {
    let state = AppState::with_context_capture(limits);
    state.set_model(byte_model(3));
    let app = router(state.clone(), &[]).unwrap();
    (state, app)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn new_session(app: &Router) -> String {
    let (status, body) = call(app, "POST", "/v1/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED);
    body["session_id"].as_str().unwrap().to_string()
}

async fn say(app: &Router, id: &str, text: &str) -> (StatusCode, Value) {
    let body = json!({ "text": text, "decode": { "strategy": "greedy" } });
    call(app, "POST", &format!("/v1/sessions/{id}/messages"), Some(body)).await
}

async fn speakers(app: &Router, id: &str) -> Vec<String> {
    let (status, body) = call(app, "GET", &format!("/v1/sessions/{id}/history"), None).await;
    assert_eq!(status, StatusCode::OK);
    body["turns"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["speaker"].as_str().unwrap().to_string())
        .collect()
}

#[tokio::test]
async fn sessions_are_opaque_and_distinct() {
    let (_, app) = loaded_app(limits());
    let a = new_session(&app).await;
    let b = new_session(&app).await;
    assert_ne!(a, b);
    for id in [&a, &b] {
        assert_eq!(id.len(), 32);
        assert!(id.chars().all(|c| c.is_ascii_hexdigit()));
    }
    assert!(speakers(&app, &a).await.is_empty());
}

#[tokio::test]
async fn first_exchange_is_indexed_and_recorded() {
    let (_, app) = loaded_app(limits());
    let id = new_session(&app).await;
    let (status, body) = say(&app, &id, "Hi").await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert!(!body["reply"].as_str().unwrap().is_empty());
    assert_eq!(body["turn_index"], 2);
    assert_eq!(body["disclaimer"], DISCLAIMER);
    assert_eq!(speakers(&app, &id).await, ["user", "bot"]);

    for i in 0..3 {
        let (status, body) = say(&app, &id, &format!("message {i}")).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["turn_index"], 4 + 2 * i);
        assert_eq!(speakers(&app, &id).await.len() % 2, 0);
    }
    let (_, history) = call(&app, "GET", &format!("/v1/sessions/{id}/history"), None).await;
    assert_eq!(history["turns"][0], json!({ "speaker": "user", "text": "Hi" }));
}

#[tokio::test]
async fn request_errors_carry_codes() {
    let (_, app) = loaded_app(limits());
    let id = new_session(&app).await;
    let missing = "0".repeat(32);

    let (status, body) = say(&app, &missing, "Hi").await;
    assert_eq!((status, body), (StatusCode::NOT_FOUND, json!({ "error": "no_such_session" })));
    let (status, body) = call(&app, "GET", &format!("/v1/sessions/{missing}/history"), None).await;
    assert_eq!((status, body), (StatusCode::NOT_FOUND, json!({ "error": "no_such_session" })));

    let (status, body) = say(&app, &id, "   ").await;
    assert_eq!((status, body), (StatusCode::BAD_REQUEST, json!({ "error": "empty_text" })));

    let uri = format!("/v1/sessions/{id}/messages");
    for (payload, code) in [
        (json!({ "txt": "Hi" }), "invalid_body"),
        (json!({ "text": "Hi", "decode": { "beam": 4 } }), "invalid_body"),
        (json!({ "text": "Hi", "decode": { "max_new_tokens": 257 } }), "invalid_decode"),
        (json!({ "text": "Hi", "decode": { "top_k": 0 } }), "invalid_decode"),
        (json!({ "text": "Hi", "decode": { "temperature": -1.0 } }), "invalid_decode"),
    ] {
        let (status, body) = call(&app, "POST", &uri, Some(payload.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{payload}");
        assert_eq!(body["error"], code, "{payload}");
    }
    assert!(speakers(&app, &id).await.is_empty());

    let (status, body) = call(&app, "GET", "/v2/nothing", None).await;
    assert_eq!((status, body), (StatusCode::NOT_FOUND, json!({ "error": "not_found" })));
    let (status, body) = call(&app, "DELETE", "/v1/sessions", None).await;
    assert_eq!(status, StatusCode::METHOD_NOT_ALLOWED);
    assert_eq!(body["error"], "method_not_allowed");
}

#[tokio::test]
async fn cap_on_reply_length_is_accepted_at_the_boundary() {
    let (_, app) = loaded_app(limits());
    let id = new_session(&app).await;
    let body = json!({ "text": "Hi", "decode": { "strategy": "greedy", "max_new_tokens": 256 } });
    let (status, _) = call(&app, "POST", &format!("/v1/sessions/{id}/messages"), Some(body)).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn generation_failure_is_500_and_leaves_history_intact() {
    let (_, app) = loaded_app(limits());
    let id = new_session(&app).await;
    let (status, body) = say(&app, &id, &"x".repeat(200)).await;
    assert_eq!(status, StatusCode::INTERNAL_SERVER_ERROR);
    assert_eq!(body["error"], "generation_failed");
    assert!(body["detail"].as_str().unwrap().contains("max_seq_len"));
    assert!(speakers(&app, &id).await.is_empty());
}

#[tokio::test]
async fn capacity_is_enforced_until_sessions_expire() {
    let limits = SessionLimits {
        max_sessions: 2,
        session_ttl: Duration::from_millis(150),
        ..limits()
    };
    let (state, app) = loaded_app(limits);
    new_session(&app).await;
    new_session(&app).await;
    let (status, body) = call(&app, "POST", "/v1/sessions", None).await;
    assert_eq!((status, body), (StatusCode::SERVICE_UNAVAILABLE, json!({ "error": "capacity" })));

    tokio::time::sleep(Duration::from_millis(300)).await;
    new_session(&app).await;
    assert_eq!(state.session_count(), 1);
}

#[tokio::test]
async fn health_reports_model_only_once_loaded() {
    let state = AppState::new(limits());
    let app = router(state.clone(), &[]).unwrap();
    let (status, body) = call(&app, "GET", "/healthz", None).await;
    assert_eq!((status, body), (StatusCode::SERVICE_UNAVAILABLE, json!({ "error": "model_not_loaded" })));

    let id = new_session(&app).await;
    let (status, body) = say(&app, &id, "Hi").await;
    assert_eq!((status, body), (StatusCode::SERVICE_UNAVAILABLE, json!({ "error": "model_not_loaded" })));

    let tiny = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 32,
        vocab_size: 16,
        max_seq_len: 8,
        dropout_rate: 0.0,
    };
    state.set_model(LoadedModel::new(DecoderWeights::init(tiny, 0).unwrap(), Vocabulary::bytes_only()));
    let (status, body) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        body,
        json!({
            "status": "ok",
            "model": {
                "n_layers": 1, "n_heads": 2, "d_model": 8, "d_ff": 32,
                "vocab_size": 16, "max_seq_len": 8, "params": 1080
            }
        })
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_posts_to_one_session_never_interleave() {
    let (_, app) = loaded_app(limits());
    let id = new_session(&app).await;
    let tasks: Vec<_> = (0..16)
        .map(|i| {
            let (app, id) = (app.clone(), id.clone());
            tokio::spawn(async move { say(&app, &id, &format!("concurrent {i}")).await })
        })
        .collect();
    let mut indices = HashSet::new();
    for t in tasks {
        let (status, body) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        indices.insert(body["turn_index"].as_u64().unwrap());
    }
    assert_eq!(indices, (1..=16).map(|k| 2 * k).collect());

    let (_, history) = call(&app, "GET", &format!("/v1/sessions/{id}/history"), None).await;
    let turns = history["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 32);
    for (i, t) in turns.iter().enumerate() {
        assert_eq!(t["speaker"], if i % 2 == 0 { "user" } else { "bot" });
    }
    let users: HashSet<&str> = turns.iter().step_by(2).map(|t| t["text"].as_str().unwrap()).collect();
    assert_eq!(users.len(), 16);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn sessions_never_see_each_others_messages() {
    let (state, app) = loaded_app(limits());
    let a = new_session(&app).await;
    let b = new_session(&app).await;
    let tasks: Vec<_> = (0..6)
        .flat_map(|i| {
            [(a.clone(), format!("apple {i}")), (b.clone(), format!("zebra {i}"))]
        })
        .map(|(id, text)| {
            let app = app.clone();
            tokio::spawn(async move { say(&app, &id, &text).await.0 })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }

    let vocab = Vocabulary::bytes_only();
    let captured = state.captured_contexts();
    assert_eq!(captured.len(), 12);
    for c in captured {
        let text = vocab.decode(&c.context_ids).unwrap();
        let (own, other) = if c.session_id == a { ("apple", "zebra") } else { ("zebra", "apple") };
        assert!(text.contains(own), "{text:?}");
        assert!(!text.contains(other), "{text:?}");
    }
}

#[tokio::test]
async fn greedy_replay_gives_identical_replies() {
    let transcript = ["Hi there", "I lost my job today", "Thanks for listening"];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let (_, app) = loaded_app(limits());
        let id = new_session(&app).await;
        let mut replies = Vec::new();
        for line in transcript {
            let (status, body) = say(&app, &id, line).await;
            assert_eq!(status, StatusCode::OK);
            replies.push(body["reply"].as_str().unwrap().to_string());
        }
        let id2 = new_session(&app).await;
        for (line, expected) in transcript.iter().zip(&replies) {
            assert_eq!(say(&app, &id2, line).await.1["reply"], expected.as_str());
        }
        runs.push(replies);
    }
    assert_eq!(runs[0], runs[1]);
}

#[tokio::test]
async fn cors_allows_only_listed_origins() {
    let state = AppState::new(limits());
    let app = router(state, &["http://localhost:5173".to_string()]).unwrap();
    let preflight = |origin: &str| {
        Request::builder()
            .method("OPTIONS")
            .uri("/v1/sessions")
            .header("origin", origin)
            .header("access-control-request-method", "POST")
            .body(Body::empty())
            .unwrap()
    };
    let res = app.clone().oneshot(preflight("http://localhost:5173")).await.unwrap();
    assert_eq!(res.headers()["access-control-allow-origin"], "http://localhost:5173");
    let res = app.oneshot(preflight("http://evil.example")).await.unwrap();
    assert!(res.headers().get("access-control-allow-origin").is_none());

    assert!(matches!(
        router(AppState::new(limits()), &["bad\norigin".to_string()]),
        Err(ServiceError::Config(_))
    ));
}

#[test]
fn model_files_must_agree_on_vocabulary_size() {
    let dir = tempfile::tempdir().unwrap();
    let model = byte_model(1);
    let ckpt = Checkpoint {
        weights: (*model.weights).clone(),
        train_config: TrainConfig::default(),
        step: 0,
        loss_history: Vec::new(),
        vocab_hash: Some(model.vocab.content_hash()),
    };
    let ckpt_path = dir.path().join("model.ckpt");
    ckpt.save(&ckpt_path).unwrap();
    let vocab_path = dir.path().join("vocab.json");
    model.vocab.save(&vocab_path).unwrap();
    let loaded = LoadedModel::from_files(&ckpt_path, &vocab_path).unwrap();
    assert_eq!(loaded.vocab.len(), 258);

    let other = coral_core::train_bpe(&["abab abab abab"], 260).unwrap().vocab;
    other.save(&vocab_path).unwrap();
    assert!(matches!(
        LoadedModel::from_files(&ckpt_path, &vocab_path),
        Err(ServiceError::VocabularyMismatch { model: 258, vocab: 260 })
    ));
    assert!(matches!(
        LoadedModel::from_files(&dir.path().join("missing.ckpt"), &vocab_path),
        Err(ServiceError::Checkpoint { .. })
    ));
}
