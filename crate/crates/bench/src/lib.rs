//! Shared fixtures for the benchmarks in `benches/`.

use coral_core::data::TrainingExample;
use coral_core::synthetic::{fit_vocabulary, SyntheticCorpus};
use coral_core::{DecoderWeights, ModelConfig, Tensor, Vocabulary};

/// Deterministic `rows × cols` tensor with values in [-1, 1).
pub fn pattern(rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|i| ((i * 7919) % 2000) as f64 / 1000.0 - 1.0).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

pub struct Fixture {
    pub vocab: Vocabulary,
    pub weights: DecoderWeights,
    pub examples: Vec<TrainingExample>,
    pub texts: Vec<String>,
}

/// Toy model, a vocabulary fitted to a synthetic corpus, and W=2 examples.
pub fn fixture() -> Fixture {
    let corpus = SyntheticCorpus {
        dialogues: 200,
        ..Default::default()
    }
    .generate();
    let vocab = fit_vocabulary(&corpus, 1024).expect("non-empty corpus");
    let examples = coral_core::data::prepare_examples(&corpus, 2, &vocab, 256)
        .examples
        .iter()
        .map(|p| p.to_training_example(vocab.end_of_text()).expect("well-formed"))
        .collect();
    let weights = DecoderWeights::init(ModelConfig::toy(vocab.len()), 0).expect("valid preset");
    let texts = corpus.iter().flat_map(|d| d.turns.iter().map(|t| t.text.clone())).collect();
    Fixture {
        vocab,
        weights,
        examples,
        texts,
    }
}
