//! HTTP chat service: in-memory sessions over one shared, read-only model.
//!
//! | Method | Path                          | Success                          |
//! |--------|-------------------------------|----------------------------------|
//! | POST   | `/v1/sessions`                | 201 `{"session_id"}`             |
//! | POST   | `/v1/sessions/{id}/messages`  | 200 `{"reply","turn_index",...}` |
//! | GET    | `/v1/sessions/{id}/history`   | 200 `{"turns":[...]}`            |
//! | GET    | `/healthz`                    | 200 `{"status":"ok","model":..}` |
//!
//! Every error body is `{"error": code}`, sometimes with a `detail` string.

mod routes;
mod state;

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use coral_core::tokenizer::TokenizerError;
use coral_core::{Checkpoint, CheckpointError, DecodeConfig, DecoderWeights, Vocabulary};
use thiserror::Error;

pub use routes::{router, DecodeOverrides, MessageRequest, MAX_NEW_TOKENS_CAP};
pub use state::{AppState, CapturedContext, SessionLimits};

/// Shown with every reply. The model is not a support service.
pub const DISCLAIMER: &str =
    "Automated research chatbot. Replies may be wrong or upsetting and are not a substitute for professional help.";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub host: IpAddr,
    pub port: u16,
    pub checkpoint_path: PathBuf,
    pub vocab_path: PathBuf,
    pub context_window: usize,
    pub decode: DecodeConfig,
    pub max_sessions: usize,
    pub session_ttl: Duration,
    /// Browser origins allowed by CORS. Empty disables the CORS layer.
    pub cors_origins: Vec<String>,
}

impl ServiceConfig {
    pub fn new(checkpoint_path: impl Into<PathBuf>, vocab_path: impl Into<PathBuf>) -> Self {
        Self {
            host: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: 8080,
            checkpoint_path: checkpoint_path.into(),
            vocab_path: vocab_path.into(),
            context_window: 2,
            decode: DecodeConfig::default(),
            max_sessions: 1024,
            session_ttl: Duration::from_secs(30 * 60),
            cors_origins: vec!["http://localhost:5173".into()],
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.port == 0 {
            return Err(ServiceError::Config("port must be in 1..=65535".into()));
        }
        if self.max_sessions == 0 {
            return Err(ServiceError::Config("max_sessions must be at least 1".into()));
        }
        if self.context_window == 0 {
            return Err(ServiceError::Config("context_window must be at least 1".into()));
        }
        if self.decode.max_new_tokens > MAX_NEW_TOKENS_CAP {
            return Err(ServiceError::Config(format!(
                "default max_new_tokens exceeds the cap of {MAX_NEW_TOKENS_CAP}"
            )));
        }
        Ok(())
    }

    pub fn limits(&self) -> SessionLimits {
        SessionLimits {
            context_window: self.context_window,
            decode: self.decode.clone(),
            max_sessions: self.max_sessions,
            session_ttl: self.session_ttl,
        }
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid service config: {0}")]
    Config(String),
    #[error("cannot load checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("cannot load vocabulary {path}: {source}")]
    Vocabulary {
        path: PathBuf,
        #[source]
        source: TokenizerError,
    },
    #[error("model expects {model} tokens but the vocabulary has {vocab}")]
    VocabularyMismatch { model: usize, vocab: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Weights and vocabulary shared by every request.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub weights: Arc<DecoderWeights>,
    pub vocab: Arc<Vocabulary>,
}

impl LoadedModel {
    /// Pairs weights with a vocabulary without checking that they agree.
    pub fn new(weights: DecoderWeights, vocab: Vocabulary) -> Self {
        Self {
            weights: Arc::new(weights),
            vocab: Arc::new(vocab),
        }
    }

    pub fn from_files(checkpoint: &std::path::Path, vocab: &std::path::Path) -> Result<Self, ServiceError> {
        let ckpt = Checkpoint::load(checkpoint).map_err(|source| ServiceError::Checkpoint {
            path: checkpoint.to_path_buf(),
            source,
        })?;
        let vocabulary = Vocabulary::load(vocab).map_err(|source| ServiceError::Vocabulary {
            path: vocab.to_path_buf(),
            source,
        })?;
        let model = ckpt.model_config().vocab_size;
        if model != vocabulary.len() {
            return Err(ServiceError::VocabularyMismatch {
                model,
                vocab: vocabulary.len(),
            });
        }
        ckpt.check_vocabulary(&vocabulary);
        Ok(Self::new(ckpt.weights, vocabulary))
    }
}

/// Loads the model, binds the port and serves until the process is stopped.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    config.validate()?;
    let (ckpt, vocab) = (config.checkpoint_path.clone(), config.vocab_path.clone());
    let model = tokio::task::spawn_blocking(move || LoadedModel::from_files(&ckpt, &vocab))
        .await
        .map_err(|e| ServiceError::Io(std::io::Error::other(e)))??;
    let state = AppState::new(config.limits());
    state.set_model(model);
    let sweeper = state.spawn_sweeper();
    let app = router(state, &config.cors_origins)?;
    let addr = SocketAddr::new(config.host, config.port);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    let result = axum::serve(listener, app).await;
    sweeper.abort();
    Ok(result?)
}
