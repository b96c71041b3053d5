//! Adam fine-tuning on masked next-token negative log-likelihood.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::data::TrainingExample;
use crate::model::{DecoderWeights, ModelError};
use crate::tape::Tape;
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip_norm: Option<f64>,
    /// Train on every next-token prediction instead of the response only.
    pub loss_on_context: bool,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            adam_eps: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            batch_size: 4,
            epochs: 3,
            seed: 0,
            grad_clip_norm: None,
            loss_on_context: false,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and non-negative", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps {} must be positive", self.adam_eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return bad(format!("grad_clip_norm {c} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient in {parameter} (norm {norm})")]
    NonFiniteGradient { parameter: String, norm: f64 },
    #[error("loss became {loss} at step {step}; last good checkpoint kept")]
    NonFiniteLoss {
        step: u64,
        loss: f64,
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint callback failed: {0}")]
    Callback(String),
}

/// Adam moments for every parameter tensor, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(weights: &DecoderWeights) -> Self {
        Self::zeros(weights.params().values().iter().map(|t| t.len()))
    }

    pub fn zeros(lens: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = lens.into_iter().map(|n| vec![0.0; n]).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `theta` in place, for step `t ≥ 1`.
pub fn adam_update(theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, config: &TrainConfig) {
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
    }
}

/// Applies one Adam step to every parameter. Gradients are in canonical
/// parameter order. Nothing is modified if any gradient is non-finite.
pub fn adam_step(
    weights: &mut DecoderWeights,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    let names: Vec<String> = weights.params().entries().into_iter().map(|(n, _)| n).collect();
    assert_eq!(grads.len(), names.len(), "one gradient per parameter");
    for (name, g) in names.iter().zip(grads) {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                parameter: name.clone(),
                norm: l2(g),
            });
        }
    }
    state.t += 1;
    let scale = match config.grad_clip_norm {
        Some(max) => {
            let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
            if norm > max { max / norm } else { 1.0 }
        }
        None => 1.0,
    };
    let mut params = weights.params_mut().values_mut();
    for (i, p) in params.iter_mut().enumerate() {
        let g: Vec<f64>;
        let g = if scale == 1.0 {
            &grads[i]
        } else {
            g = grads[i].iter().map(|x| x * scale).collect();
            &g
        };
        adam_update(p.data_mut(), g, &mut state.m[i], &mut state.v[i], state.t, config);
    }
    Ok(())
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean masked NLL over `batch` and its gradient with respect to every
/// parameter. Examples are stacked row-wise into one loss, so no padding
/// positions exist.
pub fn batch_loss_and_grads(
    weights: &DecoderWeights,
    batch: &[&TrainingExample],
    loss_on_context: bool,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let mut tape = Tape::new();
    let params = weights.bind(&mut tape, true);
    let (loss, _) = record_batch_loss(weights, &mut tape, &params, batch, loss_on_context, dropout_rng)?;
    let value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let grads = params
        .values()
        .into_iter()
        .zip(weights.params().values())
        .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok((value, grads))
}

/// Mean masked NLL of `batch` without gradients, and its target count.
pub fn batch_loss(
    weights: &DecoderWeights,
    batch: &[&TrainingExample],
    loss_on_context: bool,
) -> Result<(f64, usize), TrainError> {
    let mut tape = Tape::new();
    let params = weights.bind(&mut tape, false);
    let (loss, count) = record_batch_loss(weights, &mut tape, &params, batch, loss_on_context, None)?;
    Ok((tape.value(loss).data()[0], count))
}

fn record_batch_loss<'w>(
    weights: &DecoderWeights,
    tape: &mut Tape<'w>,
    params: &crate::model::DecoderParams<crate::tape::Var>,
    batch: &[&TrainingExample],
    loss_on_context: bool,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(crate::tape::Var, usize), TrainError> {
    let mut logits = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for ex in batch {
        logits.push(weights.forward_on_tape(tape, params, ex.inputs(), dropout_rng.as_deref_mut())?);
        targets.extend(ex.targets());
        mask.extend(ex.target_mask(loss_on_context));
    }
    let stacked = if logits.len() == 1 { logits[0] } else { tape.concat_rows(&logits)? };
    let count = mask.iter().filter(|&&m| m).count();
    Ok((tape.cross_entropy_masked(stacked, &targets, &mask)?, count))
}

/// Seeded batch order: shuffle, sort by length inside windows of a few
/// batches so batches hold similar lengths, then shuffle the batches.
pub fn batch_order(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    const BUCKET_BATCHES: usize = 8;
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.shuffle(rng);
    for window in idx.chunks_mut(batch_size * BUCKET_BATCHES) {
        window.sort_by_key(|&i| lengths[i]);
    }
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Epoch(usize),
    Final,
}

/// Fine-tunes `weights` on `examples` and returns the final checkpoint.
/// `on_checkpoint` receives one checkpoint per completed epoch and the
/// final one.
pub fn train(
    mut weights: DecoderWeights,
    examples: &[TrainingExample],
    config: &TrainConfig,
    vocab_hash: Option<String>,
    mut on_checkpoint: impl FnMut(CheckpointKind, &Checkpoint) -> Result<(), String>,
) -> Result<Checkpoint, TrainError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(TrainError::Config("no training examples".into()));
    }
    let max = weights.config().max_seq_len;
    if let Some(ex) = examples.iter().find(|e| e.len() > max) {
        return Err(TrainError::Config(format!(
            "example of length {} exceeds max_seq_len {max}",
            ex.len()
        )));
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d20f);
    let mut state = AdamState::new(&weights);
    let mut history = Vec::new();
    let lengths: Vec<usize> = examples.iter().map(TrainingExample::len).collect();
    let max_steps = config.max_steps.unwrap_or(usize::MAX);
    let snapshot = |w: &DecoderWeights, step: u64, history: &[f64]| Checkpoint {
        weights: w.clone(),
        train_config: config.clone(),
        step,
        loss_history: history.to_vec(),
        vocab_hash: vocab_hash.clone(),
    };

    'epochs: for epoch in 0..config.epochs {
        for batch in batch_order(&lengths, config.batch_size, &mut shuffle_rng) {
            if history.len() >= max_steps {
                break 'epochs;
            }
            let batch: Vec<&TrainingExample> = batch.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) =
                batch_loss_and_grads(&weights, &batch, config.loss_on_context, Some(&mut dropout_rng))?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step: history.len() as u64 + 1,
                    loss,
                    last_good: Box::new(snapshot(&weights, history.len() as u64, &history)),
                });
            }
            adam_step(&mut weights, &grads, &mut state, config)?;
            history.push(loss);
            tracing::debug!(step = history.len(), epoch, loss, "step");
        }
        let ckpt = snapshot(&weights, history.len() as u64, &history);
        on_checkpoint(CheckpointKind::Epoch(epoch + 1), &ckpt).map_err(TrainError::Callback)?;
    }
    let ckpt = snapshot(&weights, history.len() as u64, &history);
    on_checkpoint(CheckpointKind::Final, &ckpt).map_err(TrainError::Callback)?;
    Ok(ckpt)
}
