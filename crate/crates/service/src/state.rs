use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use coral_core::{ChatSession, DecodeConfig, TokenId};

use crate::LoadedModel;

#[derive(Debug, Clone)]
pub struct SessionLimits {
    pub context_window: usize,
    pub decode: DecodeConfig,
    pub max_sessions: usize,
    pub session_ttl: Duration,
}

impl Default for SessionLimits {
    fn default() -> Self {
        Self {
            context_window: 2,
            decode: DecodeConfig::default(),
            max_sessions: 1024,
            session_ttl: Duration::from_secs(30 * 60),
        }
    }
}

/// The exact token context one reply was conditioned on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedContext {
    pub session_id: String,
    pub context_ids: Vec<TokenId>,
}

pub(crate) struct SessionEntry {
    pub(crate) chat: Arc<tokio::sync::Mutex<ChatSession>>,
    last_used: Mutex<Instant>,
}

impl SessionEntry {
    pub(crate) fn touch(&self) {
        *self.last_used.lock().unwrap() = Instant::now();
    }

    fn expired(&self, now: Instant, ttl: Duration) -> bool {
        now.duration_since(*self.last_used.lock().unwrap()) > ttl
    }
}

struct Inner {
    limits: SessionLimits,
    model: RwLock<Option<Arc<LoadedModel>>>,
    sessions: Mutex<HashMap<String, Arc<SessionEntry>>>,
    capture: Option<Mutex<Vec<CapturedContext>>>,
}

/// Shared service state. Cloning is cheap.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(limits: SessionLimits) -> Self {
        Self::build(limits, false)
    }

    /// Like [`AppState::new`], but records every generation context.
    pub fn with_context_capture(limits: SessionLimits) -> Self {
        Self::build(limits, true)
    }

    fn build(limits: SessionLimits, capture: bool) -> Self {
        assert!(limits.max_sessions >= 1 && limits.context_window >= 1);
        Self {
            inner: Arc::new(Inner {
                limits,
                model: RwLock::new(None),
                sessions: Mutex::new(HashMap::new()),
                capture: capture.then(|| Mutex::new(Vec::new())),
            }),
        }
    }

    pub fn limits(&self) -> &SessionLimits {
        &self.inner.limits
    }

    pub fn set_model(&self, model: LoadedModel) {
        *self.inner.model.write().unwrap() = Some(Arc::new(model));
    }

    pub fn model(&self) -> Option<Arc<LoadedModel>> {
        self.inner.model.read().unwrap().clone()
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.lock().unwrap().len()
    }

    pub fn captured_contexts(&self) -> Vec<CapturedContext> {
        match &self.inner.capture {
            Some(c) => c.lock().unwrap().clone(),
            None => Vec::new(),
        }
    }

    pub(crate) fn record_context(&self, session_id: &str, context_ids: &[TokenId]) {
        if let Some(c) = &self.inner.capture {
            c.lock().unwrap().push(CapturedContext {
                session_id: session_id.to_string(),
                context_ids: context_ids.to_vec(),
            });
        }
    }

    /// Registers a fresh session, or returns `None` when every slot is live.
    pub(crate) fn create_session(&self) -> Option<String> {
        let mut sessions = self.inner.sessions.lock().unwrap();
        if sessions.len() >= self.inner.limits.max_sessions {
            Self::evict(&mut sessions, self.inner.limits.session_ttl);
        }
        if sessions.len() >= self.inner.limits.max_sessions {
            return None;
        }
        let id = loop {
            let id = format!("{:032x}", rand::random::<u128>());
            if !sessions.contains_key(&id) {
                break id;
            }
        };
        let chat = ChatSession::new(id.clone(), self.inner.limits.context_window);
        sessions.insert(
            id.clone(),
            Arc::new(SessionEntry {
                chat: Arc::new(tokio::sync::Mutex::new(chat)),
                last_used: Mutex::new(Instant::now()),
            }),
        );
        Some(id)
    }

    pub(crate) fn session(&self, id: &str) -> Option<Arc<SessionEntry>> {
        let entry = self.inner.sessions.lock().unwrap().get(id).cloned()?;
        entry.touch();
        Some(entry)
    }

    /// Drops sessions idle for longer than the TTL. Returns how many went.
    pub fn evict_expired(&self) -> usize {
        let mut sessions = self.inner.sessions.lock().unwrap();
        Self::evict(&mut sessions, self.inner.limits.session_ttl)
    }

    fn evict(sessions: &mut HashMap<String, Arc<SessionEntry>>, ttl: Duration) -> usize {
        let now = Instant::now();
        let before = sessions.len();
        // A session mid-generation is held elsewhere and stays registered.
        sessions.retain(|_, e| Arc::strong_count(e) > 1 || !e.expired(now, ttl));
        before - sessions.len()
    }

    /// Periodically evicts expired sessions on the current runtime.
    pub fn spawn_sweeper(&self) -> tokio::task::JoinHandle<()> {
        let state = self.clone();
        let period = (self.inner.limits.session_ttl / 4).clamp(Duration::from_millis(100), Duration::from_secs(60));
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            loop {
                tick.tick().await;
                let n = state.evict_expired();
                if n > 0 {
                    tracing::debug!(evicted = n, "expired sessions removed");
                }
            }
        })
    }
}
