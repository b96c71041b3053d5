//! Binary checkpoint format.
//!
//! ```text
//! "CORALCKPT"  version: u32 LE
//! header_len: u64 LE  header: JSON
//! per tensor: name_len: u32 LE, name: UTF-8, rank: u32 LE,
//!             dims: rank × u64 LE, data: Π dims × f32 LE
//! ```
//!
//! Weights are trained in `f64` and stored as `f32`, so a loaded checkpoint
//! equals [`DecoderWeights::round_to_f32`] of the saved one.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DecoderWeights, ModelConfig, ModelError};
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 9] = b"CORALCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint truncated in {section}")]
    Truncated { section: String },
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("malformed tensor record {index}: {reason}")]
    Record { index: usize, reason: String },
    #[error("{0} unexpected trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    loss_history: Vec<f64>,
    vocab_hash: Option<String>,
    tensor_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: DecoderWeights,
    pub train_config: TrainConfig,
    pub step: u64,
    pub loss_history: Vec<f64>,
    /// Content hash of the vocabulary the model was trained with.
    pub vocab_hash: Option<String>,
}

impl Checkpoint {
    pub fn model_config(&self) -> &ModelConfig {
        self.weights.config()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.weights.params().entries();
        let header = Header {
            model: self.weights.config().clone(),
            train: self.train_config.clone(),
            step: self.step,
            loss_history: self.loss_history.clone(),
            vocab_hash: self.vocab_hash.clone(),
            tensor_count: entries.len() as u64,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(64 + header.len() + 4 * self.weights.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (name, tensor) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        let header_len = r.u64("header length")?;
        let header: Header = serde_json::from_slice(r.take(to_usize(header_len, "header")?, "header")?)?;

        let mut tensors = HashMap::with_capacity(header.tensor_count as usize);
        for index in 0..header.tensor_count as usize {
            let section = |part: &str| format!("tensor record {index} ({part})");
            let name_len = r.u32(&section("name length"))? as usize;
            let name = std::str::from_utf8(r.take(name_len, &section("name"))?)
                .map_err(|e| CheckpointError::Record {
                    index,
                    reason: e.to_string(),
                })?
                .to_string();
            let rank = r.u32(&section("rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(to_usize(r.u64(&section("dims"))?, &section("dims"))?);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| CheckpointError::Record {
                    index,
                    reason: format!("{name}: shape {shape:?} overflows"),
                })?;
            let raw = r.take(count * 4, &section(&format!("data of {name}")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Record {
                index,
                reason: format!("{name}: {e}"),
            })?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(CheckpointError::Record {
                    index,
                    reason: format!("duplicate tensor {name}"),
                });
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        let weights = DecoderWeights::from_named(header.model, |name| tensors.remove(name))?;
        if let Some(extra) = tensors.keys().next() {
            return Err(CheckpointError::Record {
                index: header.tensor_count as usize,
                reason: format!("unknown tensor {extra}"),
            });
        }
        Ok(Self {
            weights,
            train_config: header.train,
            step: header.step,
            loss_history: header.loss_history,
            vocab_hash: header.vocab_hash,
        })
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Returns (and logs) a warning when `vocab` is not the vocabulary the
    /// checkpoint was trained with.
    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Option<String> {
        let expected = self.vocab_hash.as_deref()?;
        let actual = vocab.content_hash();
        let mut warning = None;
        if expected != actual {
            warning = Some(format!(
                "vocabulary hash {actual} differs from the checkpoint's {expected}"
            ));
        } else if vocab.len() != self.model_config().vocab_size {
            warning = Some(format!(
                "vocabulary has {} tokens but the model expects {}",
                vocab.len(),
                self.model_config().vocab_size
            ));
        }
        if let Some(w) = &warning {
            tracing::warn!("{w}");
        }
        warning
    }
}

fn to_usize(v: u64, section: &str) -> Result<usize, CheckpointError> {
    usize::try_from(v).map_err(|_| CheckpointError::Truncated {
        section: section.to_string(),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated {
                section: section.to_string(),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, section: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, section: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 258,
            max_seq_len: 12,
            dropout_rate: 0.1,
        };
        Checkpoint {
            weights: DecoderWeights::init(config, 3).unwrap(),
            train_config: TrainConfig::default(),
            step: 17,
            loss_history: vec![5.5, 4.25, 0.1 + 0.2, f64::MIN_POSITIVE],
            vocab_hash: Some(Vocabulary::bytes_only().content_hash()),
        }
    }

    #[test]
    fn round_trip_is_exact_at_stored_precision() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.weights, ckpt.weights.round_to_f32());
        assert_eq!(loaded.loss_history, ckpt.loss_history);
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.train_config, ckpt.train_config);
        assert_eq!(loaded.to_bytes(), bytes);

        let tokens = [1, 2, 3, 257, 5];
        let a = ckpt.weights.round_to_f32().forward(&tokens, false, 0).unwrap();
        let b = loaded.weights.forward(&tokens, false, 0).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn every_truncation_names_a_section() {
        let bytes = sample().to_bytes();
        let mut sections = std::collections::BTreeSet::new();
        for cut in 0..bytes.len() {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(CheckpointError::Truncated { section }) => {
                    sections.insert(section.split(" (").next().unwrap().to_string());
                }
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
        for s in ["magic", "version", "header length", "header", "tensor record 0"] {
            assert!(sections.contains(s), "{s} missing from {sections:?}");
        }
    }

    #[test]
    fn rejects_other_versions_and_magic() {
        let mut bytes = sample().to_bytes();
        bytes[9..13].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::UnsupportedVersion { found: 7 })
        ));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::TrailingBytes(1))));
    }

    #[test]
    fn vocabulary_mismatch_warns() {
        let ckpt = sample();
        assert_eq!(ckpt.check_vocabulary(&Vocabulary::bytes_only()), None);
        let other = crate::tokenizer::train_bpe(&["abab abab"], 260).unwrap().vocab;
        assert!(ckpt.check_vocabulary(&other).unwrap().contains("differs"));
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.weights, ckpt.weights.round_to_f32());
        assert!(matches!(
            Checkpoint::load(dir.path().join("absent")),
            Err(CheckpointError::Io(_))
        ));
    }
}
