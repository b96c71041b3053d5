//! Seeded generator for small corpora in the EmpatheticDialogues layout.
//!
//! Each conversation is grounded in one emotion and a situation; the
//! speaker describes it and the listener responds with sympathy and
//! follow-up questions. The opener is random; every later turn is picked
//! from the previous turn and the emotion, so a model can learn to answer
//! from context. Used for tests, benchmarks and smoke runs where the
//! real dataset is not available.

use std::io::Write;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{escape, prepare_examples, Dialogue, TrainingExample, Turn};
use crate::tokenizer::{train_bpe, TokenizerError, Vocabulary};

const EMOTIONS: [(&str, &[&str]); 8] = [
    ("afraid", &["a noise downstairs", "a storm last night", "driving on ice"]),
    ("proud", &["my daughter graduating", "finishing a marathon", "getting promoted"]),
    ("sad", &["my dog passing away", "moving away from friends", "losing my grandmother"]),
    ("excited", &["a trip to japan", "a new puppy", "the concert tonight"]),
    ("angry", &["a rude neighbor", "my car getting towed", "a broken promise"]),
    ("grateful", &["a friend helping me move", "my parents visiting", "a kind stranger"]),
    ("lonely", &["an empty apartment", "a quiet holiday", "working from home"]),
    ("surprised", &["a surprise party", "winning a raffle", "an old friend calling"]),
];

const OPENERS: [&str; 4] = [
    "I feel {e} about {s}.",
    "I have been so {e} lately, it is about {s}.",
    "Can I tell you something? I am {e} about {s}.",
    "Today I was {e} because of {s}.",
];

const LISTENER: [&str; 8] = [
    "Oh, I am sorry to hear that. What happened with {s}?",
    "That sounds like a lot. How long have you felt {e}?",
    "I understand, being {e} is hard. Do you want to talk about it?",
    "Wow, {s}! Tell me more.",
    "That makes sense. It is okay to feel {e}.",
    "I hope things get better soon. You are not alone.",
    "Thank you for sharing that with me.",
    "It sounds like you are handling it well.",
];

const FOLLOW_UPS: [&str; 4] = [
    "It started last week and I keep thinking about it.",
    "Yes, it has been on my mind all day.",
    "I talked to my family, but I still feel {e}.",
    "Honestly, I did not expect {s} to affect me this much.",
];

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub dialogues: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        Self {
            dialogues: 500,
            min_turns: 3,
            max_turns: 8,
            seed: 0,
        }
    }
}

impl SyntheticCorpus {
    pub fn generate(&self) -> Vec<Dialogue> {
        assert!(self.min_turns >= 1 && self.min_turns <= self.max_turns, "invalid turn range");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.dialogues)
            .map(|i| {
                let e = rng.random_range(0..EMOTIONS.len());
                let (emotion, situations) = EMOTIONS[e];
                let situation = *situations.choose(&mut rng).expect("non-empty");
                let h = rng.random_range(self.min_turns..=self.max_turns);
                let mut prev = rng.random_range(0..OPENERS.len());
                let turns = (0..h)
                    .map(|t| {
                        let template = match t {
                            0 => OPENERS[prev],
                            _ => {
                                let pool: &[&str] = if t % 2 == 1 { &LISTENER } else { &FOLLOW_UPS };
                                prev = (prev + e) % pool.len();
                                pool[prev]
                            }
                        };
                        Turn {
                            speaker_index: (t % 2) as u64 + 1,
                            text: template.replace("{e}", emotion).replace("{s}", situation),
                        }
                    })
                    .collect();
                Dialogue {
                    conv_id: format!("hit:{i}_conv:{}", 2 * i),
                    emotion_label: emotion.to_string(),
                    prompt: format!("I remember {situation}."),
                    turns,
                }
            })
            .collect()
    }
}

/// BPE vocabulary trained on every turn of `dialogues`, merging until
/// `target_size` or until no pair repeats.
pub fn fit_vocabulary(dialogues: &[Dialogue], target_size: usize) -> Result<Vocabulary, TokenizerError> {
    let texts: Vec<&str> = dialogues.iter().flat_map(|d| d.turns.iter().map(|t| t.text.as_str())).collect();
    Ok(train_bpe(&texts, target_size)?.vocab)
}

/// A small memorisable training set: `n` three-turn dialogues, each giving
/// one two-turn-context example, tokenized with a vocabulary fitted to the
/// same text.
pub fn overfit_fixture(n: usize, seed: u64, max_seq_len: usize) -> (Vocabulary, Vec<TrainingExample>) {
    let corpus = SyntheticCorpus {
        dialogues: n,
        min_turns: 3,
        max_turns: 3,
        seed,
    }
    .generate();
    let vocab = fit_vocabulary(&corpus, 2048).expect("non-empty corpus");
    let examples = prepare_examples(&corpus, 2, &vocab, max_seq_len)
        .examples
        .iter()
        .map(|p| p.to_training_example(vocab.end_of_text()).expect("well-formed"))
        .collect();
    (vocab, examples)
}

/// Writes dialogues in the dataset's CSV layout, escaping commas.
pub fn write_csv<W: Write>(dialogues: &[Dialogue], mut out: W) -> std::io::Result<()> {
    writeln!(out, "conv_id,utterance_idx,context,prompt,speaker_idx,utterance,selfeval,tags")?;
    for d in dialogues {
        for (i, t) in d.turns.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{},,",
                d.conv_id,
                i + 1,
                escape(&d.emotion_label),
                escape(&d.prompt),
                t.speaker_index,
                escape(&t.text)
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ingest_reader;

    #[test]
    fn csv_round_trips_through_ingestion() {
        let corpus = SyntheticCorpus {
            dialogues: 40,
            ..Default::default()
        }
        .generate();
        let mut buf = Vec::new();
        write_csv(&corpus, &mut buf).unwrap();
        let report = ingest_reader(buf.as_slice(), None).unwrap();
        assert_eq!(report.skipped_rows, 0);
        let mut expected = corpus.clone();
        expected.sort_by(|a, b| a.conv_id.cmp(&b.conv_id));
        assert_eq!(report.dialogues, expected);
        assert!(corpus.iter().any(|d| d.turns.iter().any(|t| t.text.contains(','))));
    }

    #[test]
    fn seeded_and_bounded() {
        let cfg = SyntheticCorpus {
            dialogues: 100,
            min_turns: 2,
            max_turns: 5,
            seed: 9,
        };
        let a = cfg.generate();
        assert_eq!(a, cfg.generate());
        assert!(a.iter().all(|d| (2..=5).contains(&d.turns.len())));
        assert_ne!(a, SyntheticCorpus { seed: 10, ..cfg }.generate());
    }
}
