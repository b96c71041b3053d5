//! EmpatheticDialogues ingestion and multi-turn example construction.
//!
//! Every turn of a dialogue is encoded and terminated by the end-of-text
//! token, and the concatenation is one long sequence. A training example
//! pairs `W` consecutive context turns with the turn that follows them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tokenizer::Vocabulary;
use crate::TokenId;

/// Columns every input file must carry. Extra columns are ignored.
pub const REQUIRED_COLUMNS: [&str; 6] = ["conv_id", "utterance_idx", "context", "prompt", "speaker_idx", "utterance"];

const COMMA_ESCAPE: &str = "_comma_";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("format error: {0}")]
    Format(String),
    #[error("example has no context turns")]
    EmptyContext,
    #[error("response is empty after truncation to {max_seq_len} tokens")]
    EmptyResponse { max_seq_len: usize },
    #[error("invalid example at line {line}: {reason}")]
    InvalidExample { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker_index: u64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub conv_id: String,
    pub emotion_label: String,
    pub prompt: String,
    pub turns: Vec<Turn>,
}

/// What ingestion kept and what it threw away.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub dialogues: Vec<Dialogue>,
    /// Rows with too few fields, unparsable indices or empty text.
    pub skipped_rows: usize,
    /// Dialogues whose utterance indices are not exactly `1..=H`.
    pub incomplete_dialogues: usize,
    /// Dialogues containing a blocklisted term.
    pub blocked_dialogues: usize,
}

/// Case-insensitive substring filter applied to every turn and prompt.
#[derive(Debug, Clone, Default)]
pub struct Blocklist {
    terms: Vec<String>,
}

impl Blocklist {
    pub fn new<S: AsRef<str>>(terms: impl IntoIterator<Item = S>) -> Self {
        let terms = terms
            .into_iter()
            .map(|t| t.as_ref().trim().to_lowercase())
            .filter(|t| !t.is_empty())
            .collect();
        Self { terms }
    }

    /// One term per line; blank lines and `#` comments are ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::new(text.lines().filter(|l| !l.trim_start().starts_with('#'))))
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn matches(&self, text: &str) -> bool {
        if self.terms.is_empty() {
            return false;
        }
        let lower = text.to_lowercase();
        self.terms.iter().any(|t| lower.contains(t.as_str()))
    }
}

pub fn unescape(field: &str) -> String {
    field.replace(COMMA_ESCAPE, ",")
}

pub fn escape(text: &str) -> String {
    text.replace(',', COMMA_ESCAPE)
}

pub fn ingest_csv(path: impl AsRef<Path>, blocklist: Option<&Blocklist>) -> Result<IngestReport, DataError> {
    ingest_reader(File::open(path)?, blocklist)
}

/// Parses the dataset's comma-separated layout. Fields are never quoted;
/// commas inside text are written as `_comma_`.
pub fn ingest_reader<R: Read>(reader: R, blocklist: Option<&Blocklist>) -> Result<IngestReport, DataError> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .quoting(false)
        .from_reader(reader);
    let headers = csv.headers()?.clone();
    let mut cols = [0usize; REQUIRED_COLUMNS.len()];
    for (slot, name) in cols.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::Format(format!("missing required column {name:?}")))?;
    }
    let [c_conv, c_idx, c_context, c_prompt, c_speaker, c_utt] = cols;
    let width = cols.iter().max().copied().unwrap_or(0) + 1;

    struct Row {
        utterance_idx: u64,
        turn: Turn,
    }
    let mut groups: BTreeMap<String, (String, String, Vec<Row>)> = BTreeMap::new();
    let mut skipped_rows = 0;
    for record in csv.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(_) => {
                skipped_rows += 1;
                continue;
            }
        };
        if record.len() < width {
            skipped_rows += 1;
            continue;
        }
        let parsed = (
            record[c_idx].trim().parse::<u64>(),
            record[c_speaker].trim().parse::<u64>(),
        );
        let (Ok(utterance_idx), Ok(speaker_index)) = parsed else {
            skipped_rows += 1;
            continue;
        };
        let text = unescape(&record[c_utt]);
        let conv_id = record[c_conv].trim();
        if text.trim().is_empty() || conv_id.is_empty() {
            skipped_rows += 1;
            continue;
        }
        let entry = groups.entry(conv_id.to_string()).or_insert_with(|| {
            (unescape(&record[c_context]), unescape(&record[c_prompt]), Vec::new())
        });
        entry.2.push(Row {
            utterance_idx,
            turn: Turn { speaker_index, text },
        });
    }

    let mut report = IngestReport {
        skipped_rows,
        ..Default::default()
    };
    for (conv_id, (emotion_label, prompt, mut rows)) in groups {
        rows.sort_by_key(|r| r.utterance_idx);
        let contiguous = rows.iter().enumerate().all(|(i, r)| r.utterance_idx == i as u64 + 1);
        if !contiguous {
            report.incomplete_dialogues += 1;
            continue;
        }
        let dialogue = Dialogue {
            conv_id,
            emotion_label,
            prompt,
            turns: rows.into_iter().map(|r| r.turn).collect(),
        };
        if let Some(list) = blocklist {
            if list.matches(&dialogue.prompt) || dialogue.turns.iter().any(|t| list.matches(&t.text)) {
                report.blocked_dialogues += 1;
                continue;
            }
        }
        report.dialogues.push(dialogue);
    }
    if report.skipped_rows > 0 || report.incomplete_dialogues > 0 {
        tracing::warn!(
            skipped_rows = report.skipped_rows,
            incomplete_dialogues = report.incomplete_dialogues,
            "dropped malformed input"
        );
    }
    Ok(report)
}

/// `enc(T₁) eot enc(T₂) eot … enc(T_H) eot`.
pub fn arrange_multi_turn(dialogue: &Dialogue, vocab: &Vocabulary) -> Vec<TokenId> {
    arrange_texts(dialogue.turns.iter().map(|t| t.text.as_str()), vocab)
}

pub fn arrange_texts<'a>(texts: impl IntoIterator<Item = &'a str>, vocab: &Vocabulary) -> Vec<TokenId> {
    let eot = vocab.end_of_text();
    let mut ids = Vec::new();
    for text in texts {
        ids.extend(vocab.encode(text));
        ids.push(eot);
    }
    ids
}

/// `W` consecutive context turns and the turn that answers them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextWindow<'a> {
    pub conv_id: &'a str,
    /// Zero-based index of the first context turn.
    pub window_start: usize,
    pub context: &'a [Turn],
    pub response: &'a Turn,
}

/// Every full window of `window` turns with stride one, ordered by
/// `conv_id` then `window_start`. A dialogue with `H` turns yields
/// `max(0, H − window)` windows.
pub fn segment_context_windows(dialogues: &[Dialogue], window: usize) -> Vec<ContextWindow<'_>> {
    assert!(window >= 1, "context window must be at least one turn");
    let mut order: Vec<&Dialogue> = dialogues.iter().collect();
    order.sort_by(|a, b| a.conv_id.cmp(&b.conv_id));
    let mut out = Vec::new();
    for d in order {
        for start in 0..d.turns.len().saturating_sub(window) {
            out.push(ContextWindow {
                conv_id: &d.conv_id,
                window_start: start,
                context: &d.turns[start..start + window],
                response: &d.turns[start + window],
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub input_ids: Vec<TokenId>,
    /// Number of context tokens `a`; targets are `input_ids[a..]`.
    pub source_len: usize,
    pub loss_mask: Vec<bool>,
}

impl TrainingExample {
    /// Builds an example from ids and a source length, checking that the
    /// source and target are both non-empty and the sequence ends with
    /// `end_of_text`.
    pub fn new(input_ids: Vec<TokenId>, source_len: usize, end_of_text: TokenId) -> Result<Self, String> {
        if source_len == 0 || source_len >= input_ids.len() {
            return Err(format!("source_len {source_len} outside 1..{}", input_ids.len()));
        }
        if input_ids.last() != Some(&end_of_text) {
            return Err("sequence does not end with end-of-text".into());
        }
        let loss_mask = (0..input_ids.len()).map(|i| i >= source_len).collect();
        Ok(Self {
            input_ids,
            source_len,
            loss_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn target_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Model input: every token but the last.
    pub fn inputs(&self) -> &[TokenId] {
        &self.input_ids[..self.input_ids.len() - 1]
    }

    /// Next-token targets aligned with [`inputs`](Self::inputs).
    pub fn targets(&self) -> Vec<usize> {
        self.input_ids[1..].iter().map(|&t| t as usize).collect()
    }

    /// Which of the [`targets`](Self::targets) contribute to the loss. With
    /// `loss_on_context` every next-token prediction counts.
    pub fn target_mask(&self, loss_on_context: bool) -> Vec<bool> {
        if loss_on_context {
            vec![true; self.input_ids.len() - 1]
        } else {
            self.loss_mask[1..].to_vec()
        }
    }
}

/// A training example and what had to be cut to fit it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltExample {
    pub example: TrainingExample,
    pub dropped_context_turns: usize,
    pub response_truncated: bool,
}

/// Concatenates the context turns and the response, each terminated by
/// end-of-text. Oversized examples lose their oldest context turns first
/// (at least one is always kept), then the tail of the response; the final
/// end-of-text is always kept.
pub fn to_training_example<S: AsRef<str>>(
    context: &[S],
    response: &str,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<BuiltExample, DataError> {
    if context.is_empty() {
        return Err(DataError::EmptyContext);
    }
    let eot = vocab.end_of_text();
    let encoded: Vec<Vec<TokenId>> = context.iter().map(|t| vocab.encode(t.as_ref())).collect();
    let mut response_ids = vocab.encode(response);

    let mut first = 0;
    let mut source_len: usize = encoded.iter().map(|t| t.len() + 1).sum();
    while first + 1 < encoded.len() && source_len + response_ids.len() + 1 > max_seq_len {
        source_len -= encoded[first].len() + 1;
        first += 1;
    }
    let mut response_truncated = false;
    if source_len + response_ids.len() + 1 > max_seq_len {
        let room = max_seq_len.saturating_sub(source_len + 1);
        response_ids.truncate(room);
        response_truncated = true;
    }
    if response_ids.is_empty() {
        return Err(DataError::EmptyResponse { max_seq_len });
    }

    let mut input_ids = Vec::with_capacity(source_len + response_ids.len() + 1);
    for turn in &encoded[first..] {
        input_ids.extend_from_slice(turn);
        input_ids.push(eot);
    }
    input_ids.extend(response_ids);
    input_ids.push(eot);
    let example = TrainingExample::new(input_ids, source_len, eot).expect("constructed within bounds");
    Ok(BuiltExample {
        example,
        dropped_context_turns: first,
        response_truncated,
    })
}

/// One line of a prepared-examples file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedExample {
    pub conv_id: String,
    pub window_start: usize,
    pub input_ids: Vec<TokenId>,
    pub source_len: usize,
}

impl PreparedExample {
    pub fn to_training_example(&self, end_of_text: TokenId) -> Result<TrainingExample, String> {
        TrainingExample::new(self.input_ids.clone(), self.source_len, end_of_text)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrepareReport {
    pub examples: Vec<PreparedExample>,
    pub discarded: usize,
    pub truncated_context: usize,
    pub truncated_response: usize,
}

/// Segments `dialogues` with context window `window` and tokenizes every
/// window, discarding those whose response cannot fit.
pub fn prepare_examples(
    dialogues: &[Dialogue],
    window: usize,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> PrepareReport {
    let mut report = PrepareReport::default();
    for w in segment_context_windows(dialogues, window) {
        let context: Vec<&str> = w.context.iter().map(|t| t.text.as_str()).collect();
        match to_training_example(&context, &w.response.text, vocab, max_seq_len) {
            Ok(built) => {
                report.truncated_context += usize::from(built.dropped_context_turns > 0);
                report.truncated_response += usize::from(built.response_truncated);
                report.examples.push(PreparedExample {
                    conv_id: w.conv_id.to_string(),
                    window_start: w.window_start,
                    input_ids: built.example.input_ids,
                    source_len: built.example.source_len,
                });
            }
            Err(_) => report.discarded += 1,
        }
    }
    report
}

pub fn write_jsonl<W: Write>(examples: &[PreparedExample], writer: W) -> Result<(), DataError> {
    let mut out = BufWriter::new(writer);
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_jsonl(examples: &[PreparedExample], path: impl AsRef<Path>) -> Result<(), DataError> {
    write_jsonl(examples, File::create(path)?)
}

pub fn read_jsonl<R: Read>(reader: R) -> Result<Vec<PreparedExample>, DataError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: PreparedExample = serde_json::from_str(&line).map_err(|e| DataError::InvalidExample {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<PreparedExample>, DataError> {
    read_jsonl(File::open(path)?)
}

/// Loads a prepared-examples file and validates every line against the
/// vocabulary.
pub fn load_training_examples(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<TrainingExample>, DataError> {
    let size = vocab.len() as TokenId;
    load_jsonl(path)?
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let invalid = |reason: String| DataError::InvalidExample { line: i + 1, reason };
            if let Some(&bad) = p.input_ids.iter().find(|&&t| t >= size) {
                return Err(invalid(format!("token id {bad} outside vocabulary of size {size}")));
            }
            p.to_training_example(vocab.end_of_text()).map_err(invalid)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    /// Deterministic 80/10/10 assignment from a SHA-256 of the conversation id.
    pub fn of(conv_id: &str) -> Self {
        let digest = Sha256::digest(conv_id.as_bytes());
        let bucket = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes")) % 10;
        match bucket {
            0..=7 => Split::Train,
            8 => Split::Valid,
            _ => Split::Test,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

pub fn filter_split(dialogues: Vec<Dialogue>, split: Split) -> Vec<Dialogue> {
    dialogues.into_iter().filter(|d| Split::of(&d.conv_id) == split).collect()
}
