//! Autoregressive decoding and multi-turn chat state.

use std::time::SystemTime;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::arrange_texts;
use crate::model::{CausalLm, ModelError};
use crate::tokenizer::{TokenizerError, Vocabulary};
use crate::TokenId;

/// Reply used when the model ends its turn immediately.
pub const EMPTY_REPLY: &str = "...";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    TopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub top_k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::TopK,
            top_k: 40,
            temperature: 0.9,
            max_new_tokens: 64,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            strategy: Strategy::Greedy,
            max_new_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), GenerateError> {
        let bad = |m: String| Err(GenerateError::Config(m));
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be at least 1".into());
        }
        if self.strategy == Strategy::TopK {
            if self.top_k == 0 || self.top_k > vocab_size {
                return bad(format!("top_k {} outside 1..={vocab_size}", self.top_k));
            }
            if !(self.temperature > 0.0 && self.temperature.is_finite()) {
                return bad(format!("temperature {} must be positive", self.temperature));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error("context of {len} tokens leaves no room under max_seq_len {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("empty context")]
    EmptyContext,
    #[error("empty message")]
    EmptyMessage,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Extends `context` one token at a time until `stop` is produced,
/// `max_new_tokens` are generated or the model's length limit is reached.
/// The result excludes both the context and the stop token.
pub fn generate<M: CausalLm + ?Sized>(
    model: &M,
    context: &[TokenId],
    config: &DecodeConfig,
    stop: TokenId,
) -> Result<Vec<TokenId>, GenerateError> {
    config.validate(model.vocab_size())?;
    if context.is_empty() {
        return Err(GenerateError::EmptyContext);
    }
    let max = model.max_seq_len();
    if context.len() + 1 > max {
        return Err(GenerateError::ContextOverflow { len: context.len(), max });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seq = context.to_vec();
    let mut out = Vec::new();
    while out.len() < config.max_new_tokens && seq.len() <= max {
        let logits = model.logits(&seq)?;
        let last = logits.row(seq.len() - 1);
        let next = match config.strategy {
            Strategy::Greedy => argmax(last),
            Strategy::TopK => sample_top_k(last, config.top_k, config.temperature, &mut rng),
        } as TokenId;
        if next == stop {
            break;
        }
        out.push(next);
        seq.push(next);
        if seq.len() == max {
            break;
        }
    }
    Ok(out)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Samples from `softmax(logits / temperature)` restricted to the `k`
/// largest logits (ties broken toward lower ids).
pub fn sample_top_k<R: Rng + ?Sized>(logits: &[f64], k: usize, temperature: f64, rng: &mut R) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k.clamp(1, logits.len()));
    if order.len() == 1 {
        return order[0];
    }
    let top = logits[order[0]] / temperature;
    let weights: Vec<f64> = order.iter().map(|&i| (logits[i] / temperature - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return i;
        }
        u -= w;
    }
    *order.last().expect("non-empty")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Bot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub speaker: Speaker,
    pub text: String,
}

/// One conversation. Turns alternate, starting with the user.
#[derive(Debug, Clone)]
pub struct ChatSession {
    pub session_id: String,
    pub turns: Vec<ChatTurn>,
    pub context_window: usize,
    pub created_at: SystemTime,
}

impl ChatSession {
    pub fn new(session_id: impl Into<String>, context_window: usize) -> Self {
        assert!(context_window >= 1, "context window must be at least one turn");
        Self {
            session_id: session_id.into(),
            turns: Vec::new(),
            context_window,
            created_at: SystemTime::now(),
        }
    }

    pub fn reset(&mut self) {
        self.turns.clear();
    }

    pub fn is_alternating(&self) -> bool {
        self.turns.iter().enumerate().all(|(i, t)| {
            t.speaker == if i % 2 == 0 { Speaker::User } else { Speaker::Bot }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatReply {
    pub text: String,
    /// Index of the bot turn in the session history.
    pub turn_index: usize,
    /// Exactly the token context the model was conditioned on.
    pub context_ids: Vec<TokenId>,
}

/// Appends `user_text`, answers from the last `context_window` turns and
/// appends the reply. If the context does not fit, the oldest turn is
/// dropped once before giving up; on failure the session is left as it was.
pub fn chat_respond<M: CausalLm + ?Sized>(
    session: &mut ChatSession,
    user_text: &str,
    model: &M,
    vocab: &Vocabulary,
    config: &DecodeConfig,
) -> Result<ChatReply, GenerateError> {
    if user_text.trim().is_empty() {
        return Err(GenerateError::EmptyMessage);
    }
    session.turns.push(ChatTurn {
        speaker: Speaker::User,
        text: user_text.to_string(),
    });
    match respond(session, model, vocab, config) {
        Ok((text, context_ids)) => {
            session.turns.push(ChatTurn {
                speaker: Speaker::Bot,
                text: text.clone(),
            });
            Ok(ChatReply {
                text,
                turn_index: session.turns.len(),
                context_ids,
            })
        }
        Err(e) => {
            session.turns.pop();
            Err(e)
        }
    }
}

fn respond<M: CausalLm + ?Sized>(
    session: &ChatSession,
    model: &M,
    vocab: &Vocabulary,
    config: &DecodeConfig,
) -> Result<(String, Vec<TokenId>), GenerateError> {
    let n = session.turns.len();
    let first = n - session.context_window.min(n);
    let arrange = |from: usize| arrange_texts(session.turns[from..].iter().map(|t| t.text.as_str()), vocab);
    let mut context = arrange(first);
    let mut ids = generate(model, &context, config, vocab.end_of_text());
    if matches!(ids, Err(GenerateError::ContextOverflow { .. })) && first + 1 < n {
        context = arrange(first + 1);
        ids = generate(model, &context, config, vocab.end_of_text());
    }
    let ids = ids?;
    let text = vocab.decode(&ids)?;
    let text = if text.trim().is_empty() { EMPTY_REPLY.to_string() } else { text };
    Ok((text, context))
}
