//! Byte-level BPE tokenizer.
//!
//! Ids `0..256` are the raw bytes, followed by the two special tokens
//! (end-of-text, pad), followed by one token per learned merge. Whitespace
//! is ordinary bytes: there is no pre-tokenization.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::TokenId;

pub const VOCAB_FILE_VERSION: u32 = 1;
pub const END_OF_TEXT: &str = "<|endoftext|>";
pub const PAD: &str = "<|pad|>";
const BYTE_TOKENS: usize = 256;
const NUM_SPECIALS: usize = 2;

/// Pairs seen fewer times than this are never merged.
pub const MIN_PAIR_FREQUENCY: u64 = 2;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocabulary { id: TokenId, size: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("target vocabulary size {0} must exceed {min}", min = BYTE_TOKENS + NUM_SPECIALS)]
    TargetTooSmall(usize),
    #[error("unsupported vocabulary file version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed vocabulary file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub end_of_text: TokenId,
    pub pad: TokenId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, TokenId>,
    merges: Vec<(TokenId, TokenId)>,
    merge_ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
    specials: SpecialTokens,
}

/// Result of [`train_bpe`]; `reached_target` is false when the corpus ran
/// out of mergeable pairs first.
#[derive(Debug, Clone)]
pub struct TrainedVocabulary {
    pub vocab: Vocabulary,
    pub reached_target: bool,
}

/// How special tokens appear in decoded text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum SpecialRendering {
    #[default]
    Elide,
    /// Render the end-of-text token as the given text; pad stays elided.
    EndOfText(String),
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    tokens: Vec<String>,
    merges: Vec<[TokenId; 2]>,
    specials: SpecialTokens,
}

impl Vocabulary {
    /// Byte tokens and specials only.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("no merges to validate")
    }

    fn from_merges(merges: Vec<(TokenId, TokenId)>) -> Result<Self, TokenizerError> {
        let mut id_to_token: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        id_to_token.push(END_OF_TEXT.as_bytes().to_vec());
        id_to_token.push(PAD.as_bytes().to_vec());
        let specials = SpecialTokens {
            end_of_text: BYTE_TOKENS as TokenId,
            pad: BYTE_TOKENS as TokenId + 1,
        };
        let mut token_to_id: HashMap<Vec<u8>, TokenId> =
            (0..BYTE_TOKENS).map(|b| (vec![b as u8], b as TokenId)).collect();
        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, &(left, right)) in merges.iter().enumerate() {
            let special = |id: TokenId| id == specials.end_of_text || id == specials.pad;
            let (l, r) = (left as usize, right as usize);
            if l >= id_to_token.len() || r >= id_to_token.len() || special(left) || special(right) {
                return Err(TokenizerError::Malformed(format!("merge {rank} references invalid tokens")));
            }
            let mut merged = id_to_token[l].clone();
            merged.extend_from_slice(&id_to_token[r]);
            let id = id_to_token.len() as TokenId;
            if token_to_id.insert(merged.clone(), id).is_some() {
                return Err(TokenizerError::Malformed(format!("merge {rank} duplicates an existing token")));
            }
            if merge_ranks.insert((left, right), (rank, id)).is_some() {
                return Err(TokenizerError::Malformed(format!("merge {rank} repeats an earlier pair")));
            }
            id_to_token.push(merged);
        }
        Ok(Self {
            id_to_token,
            token_to_id,
            merges,
            merge_ranks,
            specials,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn specials(&self) -> SpecialTokens {
        self.specials
    }

    pub fn end_of_text(&self) -> TokenId {
        self.specials.end_of_text
    }

    pub fn pad(&self) -> TokenId {
        self.specials.pad
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.specials.end_of_text || id == self.specials.pad
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.id_to_token.get(id as usize).map(Vec::as_slice)
    }

    /// Id of a non-special token's bytes.
    pub fn token_id(&self, bytes: &[u8]) -> Option<TokenId> {
        self.token_to_id.get(bytes).copied()
    }

    /// Applies merges lowest rank first until none applies. Never emits
    /// special ids.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = text.bytes().map(TokenId::from).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0], w[1])).map(|&(rank, id)| (rank, w[0], w[1], id)))
                .min();
            let Some((_, left, right, merged)) = best else { break };
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        ids
    }

    /// Decodes with special tokens elided.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        self.decode_with(ids, &SpecialRendering::Elide)
    }

    /// Invalid UTF-8 (possible only for id sequences that did not come from
    /// [`encode`](Self::encode)) is replaced with U+FFFD.
    pub fn decode_with(&self, ids: &[TokenId], rendering: &SpecialRendering) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            let token = self.token_bytes(id).ok_or(TokenizerError::Vocabulary {
                id,
                size: self.len(),
            })?;
            if id == self.specials.end_of_text {
                if let SpecialRendering::EndOfText(text) = rendering {
                    bytes.extend_from_slice(text.as_bytes());
                }
            } else if id != self.specials.pad {
                bytes.extend_from_slice(token);
            }
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: VOCAB_FILE_VERSION,
            tokens: self.id_to_token.iter().map(|t| BASE64.encode(t)).collect(),
            merges: self.merges.iter().map(|&(l, r)| [l, r]).collect(),
            specials: self.specials,
        };
        serde_json::to_string(&file).expect("vocabulary serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, TokenizerError> {
        let file: VocabFile = serde_json::from_str(json)?;
        if file.version != VOCAB_FILE_VERSION {
            return Err(TokenizerError::UnsupportedVersion(file.version));
        }
        let vocab = Self::from_merges(file.merges.iter().map(|&[l, r]| (l, r)).collect())?;
        if file.specials != vocab.specials {
            return Err(TokenizerError::Malformed("unexpected special token ids".into()));
        }
        if file.tokens.len() != vocab.len() {
            return Err(TokenizerError::Malformed(format!(
                "{} tokens listed, merges imply {}",
                file.tokens.len(),
                vocab.len()
            )));
        }
        for (id, encoded) in file.tokens.iter().enumerate() {
            let bytes = BASE64
                .decode(encoded)
                .map_err(|e| TokenizerError::Malformed(format!("token {id}: {e}")))?;
            if bytes != vocab.id_to_token[id] {
                return Err(TokenizerError::Malformed(format!("token {id} disagrees with merges")));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Learns merges greedily by pair frequency until the vocabulary reaches
/// `target_vocab_size`. Ties go to the lexicographically smallest
/// `(left bytes, right bytes)`. Pairs whose concatenation is already a
/// token, or that occur fewer than [`MIN_PAIR_FREQUENCY`] times, are not
/// merged.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], target_vocab_size: usize) -> Result<TrainedVocabulary, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    if target_vocab_size <= BYTE_TOKENS + NUM_SPECIALS {
        return Err(TokenizerError::TargetTooSmall(target_vocab_size));
    }

    // Identical strings share one weighted sequence.
    let mut unique: BTreeMap<&str, u64> = BTreeMap::new();
    for s in corpus {
        *unique.entry(s.as_ref()).or_default() += 1;
    }
    let mut words: Vec<(Vec<TokenId>, u64)> = unique
        .into_iter()
        .map(|(s, c)| (s.bytes().map(TokenId::from).collect(), c))
        .collect();

    let mut tokens: Vec<Vec<u8>> = Vocabulary::bytes_only().id_to_token;
    let mut known: HashSet<Vec<u8>> = tokens.iter().take(BYTE_TOKENS).cloned().collect();
    let mut counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
    let mut locations: HashMap<(TokenId, TokenId), HashSet<usize>> = HashMap::new();
    for (w, (ids, c)) in words.iter().enumerate() {
        for pair in ids.windows(2) {
            let key = (pair[0], pair[1]);
            *counts.entry(key).or_default() += c;
            locations.entry(key).or_default().insert(w);
        }
    }

    let mut merges = Vec::new();
    let target_merges = target_vocab_size - BYTE_TOKENS - NUM_SPECIALS;
    let mut banned: HashSet<(TokenId, TokenId)> = HashSet::new();
    while merges.len() < target_merges {
        let best = counts
            .iter()
            .filter(|&(pair, &c)| c >= MIN_PAIR_FREQUENCY && !banned.contains(pair))
            .max_by(|a, b| {
                a.1.cmp(b.1).then_with(|| pair_order(&tokens, *b.0, *a.0))
            })
            .map(|(&pair, _)| pair);
        let Some(pair) = best else { break };

        let mut merged = tokens[pair.0 as usize].clone();
        merged.extend_from_slice(&tokens[pair.1 as usize]);
        if known.contains(&merged) {
            banned.insert(pair);
            continue;
        }
        let new_id = tokens.len() as TokenId;
        known.insert(merged.clone());
        tokens.push(merged);
        merges.push(pair);

        let mut affected: Vec<usize> = locations.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for w in affected {
            let (ids, c) = &mut words[w];
            for p in ids.windows(2) {
                let key = (p[0], p[1]);
                if let Some(v) = counts.get_mut(&key) {
                    *v -= *c;
                    if *v == 0 {
                        counts.remove(&key);
                    }
                }
            }
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            *ids = out;
            for p in ids.windows(2) {
                let key = (p[0], p[1]);
                *counts.entry(key).or_default() += *c;
                locations.entry(key).or_default().insert(w);
            }
        }
    }

    let reached_target = merges.len() == target_merges;
    let vocab = Vocabulary::from_merges(merges)?;
    Ok(TrainedVocabulary { vocab, reached_target })
}

fn pair_order(tokens: &[Vec<u8>], a: (TokenId, TokenId), b: (TokenId, TokenId)) -> Ordering {
    (&tokens[a.0 as usize], &tokens[a.1 as usize]).cmp(&(&tokens[b.0 as usize], &tokens[b.1 as usize]))
}
