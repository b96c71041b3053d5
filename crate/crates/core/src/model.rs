//! The generative transformer decoder.
//!
//! Pre-layer-norm blocks (norm → causal self-attention → residual, norm →
//! GELU feed-forward → residual), learned absolute position embeddings, a
//! final layer norm, and an output head tied to the token embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::TokenId;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence length {len} outside 1..={max}")]
    Length { len: usize, max: usize },
    #[error("token id {id} not in vocabulary of size {vocab_size}")]
    Vocabulary { id: TokenId, vocab_size: usize },
    #[error("missing or malformed parameter {0}")]
    Parameter(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelConfig {
    /// Two-layer desk-scale preset.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 256,
            vocab_size,
            max_seq_len: 256,
            dropout_rate: 0.1,
        }
    }

    /// 12 decoder layers. Width and head count are placeholders.
    pub fn small(vocab_size: usize) -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_ff: 3072,
            vocab_size,
            max_seq_len: 1024,
            dropout_rate: 0.1,
        }
    }

    /// 24 decoder layers. Width and head count are placeholders.
    pub fn large(vocab_size: usize) -> Self {
        Self {
            n_layers: 24,
            n_heads: 16,
            d_model: 1024,
            d_ff: 4096,
            vocab_size,
            max_seq_len: 1024,
            dropout_rate: 0.1,
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy(vocab_size)),
            "small" => Some(Self::small(vocab_size)),
            "large" => Some(Self::large(vocab_size)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(ModelError::Config("max_seq_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Scalar parameters in one decoder block.
    pub fn params_per_layer(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d
    }

    /// Scalar parameters in the whole model under weight tying.
    pub fn count_params(&self) -> usize {
        let d = self.d_model;
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * self.params_per_layer() + 2 * d
    }
}

/// Per-block parameters, generic over what a parameter is: a [`Tensor`],
/// a tape [`Var`], a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm_gain: T,
    pub attn_norm_bias: T,
    pub query_weight: T,
    pub query_bias: T,
    pub key_weight: T,
    pub key_bias: T,
    pub value_weight: T,
    pub value_bias: T,
    pub attn_out_weight: T,
    pub attn_out_bias: T,
    pub ff_norm_gain: T,
    pub ff_norm_bias: T,
    pub ff_in_weight: T,
    pub ff_in_bias: T,
    pub ff_out_weight: T,
    pub ff_out_bias: T,
}

const LAYER_FIELDS: [&str; 16] = [
    "attn_norm.gain",
    "attn_norm.bias",
    "attn.query.weight",
    "attn.query.bias",
    "attn.key.weight",
    "attn.key.bias",
    "attn.value.weight",
    "attn.value.bias",
    "attn.out.weight",
    "attn.out.bias",
    "ff_norm.gain",
    "ff_norm.bias",
    "ff.in.weight",
    "ff.in.bias",
    "ff.out.weight",
    "ff.out.bias",
];

impl<T> LayerParams<T> {
    fn refs(&self) -> [&T; 16] {
        [
            &self.attn_norm_gain,
            &self.attn_norm_bias,
            &self.query_weight,
            &self.query_bias,
            &self.key_weight,
            &self.key_bias,
            &self.value_weight,
            &self.value_bias,
            &self.attn_out_weight,
            &self.attn_out_bias,
            &self.ff_norm_gain,
            &self.ff_norm_bias,
            &self.ff_in_weight,
            &self.ff_in_bias,
            &self.ff_out_weight,
            &self.ff_out_bias,
        ]
    }

    fn muts(&mut self) -> [&mut T; 16] {
        [
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.query_weight,
            &mut self.query_bias,
            &mut self.key_weight,
            &mut self.key_bias,
            &mut self.value_weight,
            &mut self.value_bias,
            &mut self.attn_out_weight,
            &mut self.attn_out_bias,
            &mut self.ff_norm_gain,
            &mut self.ff_norm_bias,
            &mut self.ff_in_weight,
            &mut self.ff_in_bias,
            &mut self.ff_out_weight,
            &mut self.ff_out_bias,
        ]
    }

    fn from_fn<E>(mut f: impl FnMut(usize) -> Result<T, E>) -> Result<Self, E> {
        Ok(Self {
            attn_norm_gain: f(0)?,
            attn_norm_bias: f(1)?,
            query_weight: f(2)?,
            query_bias: f(3)?,
            key_weight: f(4)?,
            key_bias: f(5)?,
            value_weight: f(6)?,
            value_bias: f(7)?,
            attn_out_weight: f(8)?,
            attn_out_bias: f(9)?,
            ff_norm_gain: f(10)?,
            ff_norm_bias: f(11)?,
            ff_in_weight: f(12)?,
            ff_in_bias: f(13)?,
            ff_out_weight: f(14)?,
            ff_out_bias: f(15)?,
        })
    }
}

/// The full named parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm_gain: T,
    pub final_norm_bias: T,
}

impl<T> DecoderParams<T> {
    /// Parameters in canonical order with their names.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (field, p) in LAYER_FIELDS.iter().zip(layer.refs()) {
                out.push((format!("layers.{i}.{field}"), p));
            }
        }
        out.push(("final_norm.gain".to_string(), &self.final_norm_gain));
        out.push(("final_norm.bias".to_string(), &self.final_norm_bias));
        out
    }

    pub fn values(&self) -> Vec<&T> {
        self.entries().into_iter().map(|(_, v)| v).collect()
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.muts());
        }
        out.push(&mut self.final_norm_gain);
        out.push(&mut self.final_norm_bias);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> DecoderParams<U> {
        let entries = self.entries();
        let mut it = entries.iter().map(|(n, v)| f(n, v));
        let mut next = || it.next().expect("entry count matches structure");
        let token_embedding = next();
        let position_embedding = next();
        let layers = (0..self.layers.len())
            .map(|_| LayerParams::from_fn::<()>(|_| Ok(next())).expect("infallible"))
            .collect();
        DecoderParams {
            token_embedding,
            position_embedding,
            layers,
            final_norm_gain: next(),
            final_norm_bias: next(),
        }
    }

    /// Builds the structure for `n_layers` from a generator called in
    /// canonical order.
    pub fn try_build<E>(n_layers: usize, mut f: impl FnMut(&str) -> Result<T, E>) -> Result<Self, E> {
        let token_embedding = f("token_embedding")?;
        let position_embedding = f("position_embedding")?;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            layers.push(LayerParams::from_fn(|k| f(&format!("layers.{i}.{}", LAYER_FIELDS[k])))?);
        }
        Ok(DecoderParams {
            token_embedding,
            position_embedding,
            layers,
            final_norm_gain: f("final_norm.gain")?,
            final_norm_bias: f("final_norm.bias")?,
        })
    }
}

/// Expected shape of a named parameter.
fn param_shape(config: &ModelConfig, name: &str) -> Vec<usize> {
    let d = config.d_model;
    let f = config.d_ff;
    let field = name.rsplit_once("layers.").map_or(name, |(_, rest)| {
        rest.split_once('.').map_or(rest, |(_, field)| field)
    });
    match field {
        "token_embedding" => vec![config.vocab_size, d],
        "position_embedding" => vec![config.max_seq_len, d],
        "attn.query.weight" | "attn.key.weight" | "attn.value.weight" | "attn.out.weight" => vec![d, d],
        "ff.in.weight" => vec![d, f],
        "ff.in.bias" => vec![f],
        "ff.out.weight" => vec![f, d],
        _ => vec![d],
    }
}

fn is_norm_gain(name: &str) -> bool {
    name.ends_with("norm.gain")
}

fn is_weight(name: &str) -> bool {
    name.ends_with("embedding") || name.ends_with(".weight")
}

/// Causal language model interface used by metrics and generation.
pub trait CausalLm {
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    /// Next-token logits, one row per input position.
    fn logits(&self, tokens: &[TokenId]) -> Result<Tensor, ModelError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    config: ModelConfig,
    params: DecoderParams<Tensor>,
}

impl DecoderWeights {
    /// Normal(0, 0.02) weights and embeddings, zero biases, unit
    /// layer-norm gains. Deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = DecoderParams::try_build::<ModelError>(config.n_layers, |name| {
            let shape = param_shape(&config, name);
            Ok(if is_norm_gain(name) {
                Tensor::full(&shape, 1.0)
            } else if is_weight(name) {
                Tensor::randn(&shape, INIT_STD, &mut rng)
            } else {
                Tensor::zeros(&shape)
            })
        })?;
        Ok(Self { config, params })
    }

    /// Assembles weights from named tensors, checking every shape.
    pub fn from_named(
        config: ModelConfig,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let params = DecoderParams::try_build(config.n_layers, |name| {
            let t = lookup(name).ok_or_else(|| ModelError::Parameter(name.to_string()))?;
            if t.shape() != param_shape(&config, name) {
                return Err(ModelError::Parameter(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    param_shape(&config, name)
                )));
            }
            Ok(t)
        })?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &DecoderParams<Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut DecoderParams<Tensor> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.values().iter().map(|t| t.len()).sum()
    }

    /// Every parameter rounded through `f32`, the stored checkpoint precision.
    pub fn round_to_f32(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.map(|_, t| t.round_to_f32()),
        }
    }

    /// Registers every parameter on `tape` as a borrowed leaf.
    pub fn bind<'w>(&'w self, tape: &mut Tape<'w>, requires_grad: bool) -> DecoderParams<Var> {
        let mut values = self.params.values().into_iter();
        DecoderParams::try_build::<()>(self.config.n_layers, |_| {
            Ok(tape.leaf_ref(values.next().expect("structure matches config"), requires_grad))
        })
        .expect("infallible")
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        let max = self.config.max_seq_len;
        if tokens.is_empty() || tokens.len() > max {
            return Err(ModelError::Length { len: tokens.len(), max });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::Vocabulary {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and returns the `L × vocab`
    /// logits. Dropout is applied only when `dropout_rng` is given.
    pub fn forward_on_tape<'w>(
        &self,
        tape: &mut Tape<'w>,
        params: &DecoderParams<Var>,
        tokens: &[TokenId],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let rate = cfg.dropout_rate;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();

        let tok = tape.gather_rows(params.token_embedding, &ids)?;
        let pos = tape.gather_rows(params.position_embedding, &positions)?;
        let mut x = tape.add(tok, pos)?;
        x = maybe_dropout(tape, x, rate, dropout_rng.as_deref_mut());

        for layer in &params.layers {
            let h = tape.layer_norm(x, layer.attn_norm_gain, layer.attn_norm_bias, LAYER_NORM_EPS)?;
            let attn = self.attention(tape, layer, h)?;
            let attn = maybe_dropout(tape, attn, rate, dropout_rng.as_deref_mut());
            x = tape.add(x, attn)?;

            let h = tape.layer_norm(x, layer.ff_norm_gain, layer.ff_norm_bias, LAYER_NORM_EPS)?;
            let f = tape.matmul(h, layer.ff_in_weight)?;
            let f = tape.add_bias(f, layer.ff_in_bias)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, layer.ff_out_weight)?;
            let f = tape.add_bias(f, layer.ff_out_bias)?;
            let f = maybe_dropout(tape, f, rate, dropout_rng.as_deref_mut());
            x = tape.add(x, f)?;
        }

        let x = tape.layer_norm(x, params.final_norm_gain, params.final_norm_bias, LAYER_NORM_EPS)?;
        Ok(tape.matmul_nt(x, params.token_embedding)?)
    }

    fn attention(&self, tape: &mut Tape<'_>, layer: &LayerParams<Var>, h: Var) -> Result<Var, ModelError> {
        let project = |tape: &mut Tape<'_>, w: Var, b: Var| -> Result<Var, TensorError> {
            let y = tape.matmul(h, w)?;
            tape.add_bias(y, b)
        };
        let q = project(tape, layer.query_weight, layer.query_bias)?;
        let k = project(tape, layer.key_weight, layer.key_bias)?;
        let v = project(tape, layer.value_weight, layer.value_bias)?;

        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for head in 0..self.config.n_heads {
            let qh = tape.slice_cols(q, head * hd, hd)?;
            let kh = tape.slice_cols(k, head * hd, hd)?;
            let vh = tape.slice_cols(v, head * hd, hd)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.causal_softmax_rows(scores)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let out = tape.matmul(merged, layer.attn_out_weight)?;
        Ok(tape.add_bias(out, layer.attn_out_bias)?)
    }

    /// Logits for `tokens`. With `train_mode`, dropout is sampled from a
    /// generator seeded with `seed`; otherwise the pass is deterministic.
    pub fn forward(&self, tokens: &[TokenId], train_mode: bool, seed: u64) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = self.forward_on_tape(&mut tape, &params, tokens, train_mode.then_some(&mut rng))?;
        Ok(tape.value(logits).clone())
    }
}

fn maybe_dropout(tape: &mut Tape<'_>, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) => tape.dropout(x, rate, rng),
        None => x,
    }
}

impl CausalLm for DecoderWeights {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn logits(&self, tokens: &[TokenId]) -> Result<Tensor, ModelError> {
        self.forward(tokens, false, 0)
    }
}

impl<M: CausalLm + ?Sized> CausalLm for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn max_seq_len(&self) -> usize {
        (**self).max_seq_len()
    }

    fn logits(&self, tokens: &[TokenId]) -> Result<Tensor, ModelError> {
        (**self).logits(tokens)
    }
}

impl<M: CausalLm + ?Sized> CausalLm for std::sync::Arc<M> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn max_seq_len(&self) -> usize {
        (**self).max_seq_len()
    }

    fn logits(&self, tokens: &[TokenId]) -> Result<Tensor, ModelError> {
        (**self).logits(tokens)
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 32,
            vocab_size: 16,
            max_seq_len: 8,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn toy_param_count_matches_enumeration() {
        let cfg = tiny_config();
        assert_eq!(cfg.count_params(), 1080);
        let weights = DecoderWeights::init(cfg, 0).unwrap();
        assert_eq!(weights.num_params(), 1080);
    }

    #[test]
    fn per_layer_term_is_linear_in_depth() {
        let cfg = tiny_config();
        let mut doubled = cfg.clone();
        doubled.n_layers = 2;
        assert_eq!(doubled.count_params() - cfg.count_params(), cfg.params_per_layer());

        let small = ModelConfig::small(50_257);
        let large = ModelConfig {
            d_model: small.d_model,
            d_ff: small.d_ff,
            n_heads: small.n_heads,
            ..ModelConfig::large(50_257)
        };
        assert_eq!(large.count_params() - small.count_params(), 12 * small.params_per_layer());
    }

    #[test]
    fn presets_have_paper_depths() {
        assert_eq!(ModelConfig::small(100).n_layers, 12);
        assert_eq!(ModelConfig::large(100).n_layers, 24);
        for name in ["toy", "small", "large"] {
            ModelConfig::preset(name, 2000).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("huge", 10).is_none());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = tiny_config();
        cfg.n_heads = 3;
        assert!(matches!(DecoderWeights::init(cfg, 0), Err(ModelError::Config(_))));
        let mut cfg = tiny_config();
        cfg.max_seq_len = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.dropout_rate = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_with_unit_gains() {
        let a = DecoderWeights::init(tiny_config(), 7).unwrap();
        let b = DecoderWeights::init(tiny_config(), 7).unwrap();
        assert_eq!(a, b);
        let c = DecoderWeights::init(tiny_config(), 8).unwrap();
        assert_ne!(a, c);
        for (name, t) in a.params().entries() {
            if name.ends_with("norm.gain") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn init_embedding_mean_is_near_zero() {
        let cfg = ModelConfig {
            vocab_size: 2000,
            ..ModelConfig::toy(2000)
        };
        let w = DecoderWeights::init(cfg, 3).unwrap();
        let emb = &w.params().token_embedding;
        assert!(emb.len() >= 10_000);
        let mean = emb.data().iter().sum::<f64>() / emb.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        let var = emb.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / emb.len() as f64;
        assert!((var.sqrt() - INIT_STD).abs() < 0.001);
    }

    #[test]
    fn forward_shape_and_errors() {
        let w = DecoderWeights::init(tiny_config(), 1).unwrap();
        let logits = w.logits(&[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(logits.shape(), &[5, 16]);
        assert!(matches!(w.logits(&[0; 9]), Err(ModelError::Length { len: 9, max: 8 })));
        assert!(matches!(w.logits(&[]), Err(ModelError::Length { .. })));
        assert!(matches!(
            w.logits(&[1, 16]),
            Err(ModelError::Vocabulary { id: 16, vocab_size: 16 })
        ));
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let cfg = ModelConfig {
            dropout_rate: 0.5,
            ..tiny_config()
        };
        let w = DecoderWeights::init(cfg, 1).unwrap();
        let tokens = [3, 1, 4, 1, 5];
        let eval_a = w.forward(&tokens, false, 1).unwrap();
        let eval_b = w.forward(&tokens, false, 2).unwrap();
        assert_eq!(eval_a, eval_b);
        let train_a = w.forward(&tokens, true, 1).unwrap();
        let train_b = w.forward(&tokens, true, 1).unwrap();
        let train_c = w.forward(&tokens, true, 2).unwrap();
        assert_eq!(train_a, train_b);
        assert_ne!(train_a, eval_a);
        assert_ne!(train_a, train_c);
    }

    #[test]
    fn named_round_trip() {
        let w = DecoderWeights::init(tiny_config(), 4).unwrap();
        let named: std::collections::HashMap<String, Tensor> = w
            .params()
            .entries()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let rebuilt = DecoderWeights::from_named(tiny_config(), |n| named.get(n).cloned()).unwrap();
        assert_eq!(rebuilt, w);
        let err = DecoderWeights::from_named(tiny_config(), |n| {
            (n != "final_norm.bias").then(|| named[n].clone())
        })
        .unwrap_err();
        assert_eq!(err, ModelError::Parameter("final_norm.bias".into()));
    }
}
