//! Core of the Coral dialogue model: a from-scratch causal transformer
//! decoder with its autodiff engine, byte-level BPE tokenizer, multi-turn
//! dialogue pipeline, Adam training loop, evaluation metrics and
//! context-conditioned generation.

pub mod checkpoint;
pub mod data;
pub mod generate;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use data::{Dialogue, PreparedExample, TrainingExample, Turn};
pub use generate::{chat_respond, generate, ChatSession, DecodeConfig, Speaker, Strategy};
pub use metrics::EvalReport;
pub use model::{CausalLm, DecoderWeights, ModelConfig, ModelError};
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};
pub use tokenizer::{train_bpe, Vocabulary};
pub use train::TrainConfig;

/// Index into a [`tokenizer::Vocabulary`].
pub type TokenId = u32;
