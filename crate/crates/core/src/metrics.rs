//! Perplexity over response tokens and token-level BLEU.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TrainingExample;
use crate::generate::{generate, DecodeConfig, GenerateError};
use crate::model::{CausalLm, ModelError};
use crate::tape::Tape;
use crate::tensor::TensorError;
use crate::TokenId;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no target tokens to score")]
    DegenerateCorpus,
    #[error("BLEU order {0} outside 1..=4")]
    Order(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
}

/// Summed negative log-likelihood and the number of tokens it covers.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NllStats {
    pub nll_sum: f64,
    pub tokens: usize,
}

impl NllStats {
    pub fn perplexity(&self) -> Result<f64, MetricsError> {
        if self.tokens == 0 {
            return Err(MetricsError::DegenerateCorpus);
        }
        Ok((self.nll_sum / self.tokens as f64).exp())
    }
}

/// Teacher-forced NLL of the response tokens of `example`.
pub fn example_nll<M: CausalLm + ?Sized>(model: &M, example: &TrainingExample) -> Result<NllStats, MetricsError> {
    let logits = model.logits(example.inputs())?;
    let mask = example.target_mask(false);
    let tokens = mask.iter().filter(|&&m| m).count();
    let mut tape = Tape::new();
    let l = tape.leaf(logits, false);
    let mean = tape.cross_entropy_masked(l, &example.targets(), &mask)?;
    Ok(NllStats {
        nll_sum: tape.value(mean).data()[0] * tokens as f64,
        tokens,
    })
}

/// `exp` of the mean NLL over every response token in the corpus, pooled
/// at token level.
pub fn perplexity<M: CausalLm + ?Sized>(model: &M, examples: &[TrainingExample]) -> Result<f64, MetricsError> {
    corpus_nll(model, examples)?.perplexity()
}

pub fn corpus_nll<M: CausalLm + ?Sized>(model: &M, examples: &[TrainingExample]) -> Result<NllStats, MetricsError> {
    let mut total = NllStats::default();
    for ex in examples {
        let s = example_nll(model, ex)?;
        total.nll_sum += s.nll_sum;
        total.tokens += s.tokens;
    }
    Ok(total)
}

/// n-gram multiset of one order.
pub fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Additive BLEU sufficient statistics for orders 1..=4.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub clipped: [u64; MAX_ORDER],
    pub total: [u64; MAX_ORDER],
    pub candidate_len: u64,
    pub reference_len: u64,
}

impl BleuStats {
    pub fn from_pair<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Self {
        let mut s = Self {
            candidate_len: candidate.len() as u64,
            reference_len: reference.len() as u64,
            ..Self::default()
        };
        for n in 1..=MAX_ORDER {
            let cand = ngram_counts(candidate, n);
            let refs = ngram_counts(reference, n);
            s.total[n - 1] = candidate.len().saturating_sub(n - 1) as u64;
            s.clipped[n - 1] = cand
                .iter()
                .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)) as u64)
                .sum();
        }
        s
    }

    pub fn add(&mut self, other: &Self) {
        for n in 0..MAX_ORDER {
            self.clipped[n] += other.clipped[n];
            self.total[n] += other.total[n];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    /// `exp(min(0, 1 − r/c))`.
    pub fn brevity_penalty(&self) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        (1.0 - self.reference_len as f64 / self.candidate_len as f64).min(0.0).exp()
    }

    /// Clipped n-gram precision; orders above one use add-one smoothing
    /// when nothing matched.
    pub fn precision(&self, n: usize) -> Result<f64, MetricsError> {
        if !(1..=MAX_ORDER).contains(&n) {
            return Err(MetricsError::Order(n));
        }
        let (clipped, total) = (self.clipped[n - 1], self.total[n - 1]);
        Ok(if n >= 2 && clipped == 0 {
            1.0 / (total + 1) as f64
        } else if total == 0 {
            0.0
        } else {
            clipped as f64 / total as f64
        })
    }

    /// BLEU-n in `[0, 1]`: brevity penalty times the order-n precision.
    pub fn bleu(&self, n: usize) -> Result<f64, MetricsError> {
        let p = self.precision(n)?;
        if self.candidate_len == 0 {
            return Ok(0.0);
        }
        Ok(self.brevity_penalty() * p)
    }

    /// Mean of BLEU-1..4 on a 0–100 scale.
    pub fn average(&self) -> f64 {
        let scores = self.scores();
        scores.iter().sum::<f64>() / MAX_ORDER as f64
    }

    /// BLEU-1..4 on a 0–100 scale.
    pub fn scores(&self) -> [f64; MAX_ORDER] {
        std::array::from_fn(|i| 100.0 * self.bleu(i + 1).expect("order in range"))
    }
}

pub fn bleu_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Result<f64, MetricsError> {
    BleuStats::from_pair(candidate, reference).bleu(n)
}

/// Corpus-level Average BLEU (0–100) from pooled statistics.
pub fn average_bleu<T: Eq + Hash>(pairs: &[(&[T], &[T])]) -> f64 {
    let mut stats = BleuStats::default();
    for (c, r) in pairs {
        stats.add(&BleuStats::from_pair(c, r));
    }
    stats.average()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub average_bleu: f64,
    pub token_count: usize,
    pub example_count: usize,
}

impl EvalReport {
    pub fn bleu_by_n(&self) -> [f64; MAX_ORDER] {
        [self.bleu_1, self.bleu_2, self.bleu_3, self.bleu_4]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: [(&str, String); 8] = [
            ("perplexity", format!("{:.4}", self.perplexity)),
            ("bleu_1", format!("{:.2}", self.bleu_1)),
            ("bleu_2", format!("{:.2}", self.bleu_2)),
            ("bleu_3", format!("{:.2}", self.bleu_3)),
            ("bleu_4", format!("{:.2}", self.bleu_4)),
            ("average_bleu", format!("{:.2}", self.average_bleu)),
            ("token_count", self.token_count.to_string()),
            ("example_count", self.example_count.to_string()),
        ];
        let width = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
        for (name, value) in rows {
            writeln!(f, "{name:<14}{value:>width$}")?;
        }
        Ok(())
    }
}

/// The response of `example` without its end-of-text.
pub fn reference_response(example: &TrainingExample) -> &[TokenId] {
    &example.input_ids[example.source_len..example.input_ids.len() - 1]
}

/// Perplexity from teacher forcing and BLEU of `respond(example)` against
/// each reference response.
pub fn evaluate_with<M, F>(model: &M, examples: &[TrainingExample], mut respond: F) -> Result<EvalReport, MetricsError>
where
    M: CausalLm + ?Sized,
    F: FnMut(&TrainingExample) -> Result<Vec<TokenId>, MetricsError>,
{
    let nll = corpus_nll(model, examples)?;
    let mut bleu = BleuStats::default();
    for ex in examples {
        let candidate = respond(ex)?;
        bleu.add(&BleuStats::from_pair(&candidate, reference_response(ex)));
    }
    let [bleu_1, bleu_2, bleu_3, bleu_4] = bleu.scores();
    Ok(EvalReport {
        perplexity: nll.perplexity()?,
        bleu_1,
        bleu_2,
        bleu_3,
        bleu_4,
        average_bleu: (bleu_1 + bleu_2 + bleu_3 + bleu_4) / MAX_ORDER as f64,
        token_count: nll.tokens,
        example_count: examples.len(),
    })
}

/// [`evaluate_with`] using the model's own generations from each context.
pub fn evaluate<M: CausalLm + ?Sized>(
    model: &M,
    examples: &[TrainingExample],
    decode: &DecodeConfig,
    end_of_text: TokenId,
) -> Result<EvalReport, MetricsError> {
    evaluate_with(model, examples, |ex| {
        Ok(generate(model, &ex.input_ids[..ex.source_len], decode, end_of_text)?)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Row `i` of the logits is `ln p` for a fixed table of next-token
    /// probabilities keyed by position.
    struct Table {
        vocab: usize,
        rows: Vec<Vec<f64>>,
    }

    impl CausalLm for Table {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn max_seq_len(&self) -> usize {
            64
        }
        fn logits(&self, tokens: &[TokenId]) -> Result<Tensor, ModelError> {
            let data = (0..tokens.len())
                .flat_map(|i| match self.rows.get(i) {
                    Some(r) => r.iter().map(|p| p.ln()).collect::<Vec<_>>(),
                    None => vec![0.0; self.vocab],
                })
                .collect();
            Ok(Tensor::new(vec![tokens.len(), self.vocab], data).unwrap())
        }
    }

    fn example(ids: Vec<TokenId>, source_len: usize) -> TrainingExample {
        let eot = *ids.last().unwrap();
        TrainingExample::new(ids, source_len, eot).unwrap()
    }

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let m = Table { vocab: 16, rows: vec![] };
        let exs = [example(vec![1, 2, 3, 15], 1), example(vec![4, 5, 15], 2)];
        let ppl = perplexity(&m, &exs).unwrap();
        assert!((ppl - 16.0).abs() < 1e-12, "{ppl}");
    }

    #[test]
    fn certain_model_has_unit_perplexity() {
        let one_hot = |t: usize| (0..4).map(|i| if i == t { 1.0 } else { 0.0 }).collect();
        let m = Table {
            vocab: 4,
            rows: vec![one_hot(1), one_hot(2), one_hot(3)],
        };
        assert_eq!(perplexity(&m, &[example(vec![0, 1, 2, 3], 1)]).unwrap(), 1.0);
    }

    #[test]
    fn pooled_hand_probabilities() {
        // Position 0 predicts 1 with p = 0.5; position 1 predicts 3 with p = 0.25.
        let m = Table {
            vocab: 4,
            rows: vec![vec![0.25, 0.5, 0.125, 0.125], vec![0.25, 0.25, 0.25, 0.25]],
        };
        // Example A targets {1, 3} with p {0.5, 0.25}; example B targets {1} with p 0.5.
        let a = example(vec![0, 1, 3], 1);
        let b = example(vec![2, 1], 1);
        let ppl = perplexity(&m, &[a, b]).unwrap();
        let expected = 2f64.powf(4.0 / 3.0);
        assert!((ppl - expected).abs() < 1e-12, "{ppl} vs {expected}");
    }

    #[test]
    fn degenerate_corpus() {
        let m = Table { vocab: 4, rows: vec![] };
        assert!(matches!(perplexity(&m, &[]), Err(MetricsError::DegenerateCorpus)));
    }

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn clipping_case() {
        let c = words("the the the the the the the");
        let r = words("the cat is on the mat");
        assert_eq!(bleu_n(&c, &r, 1).unwrap(), 2.0 / 7.0);
    }

    #[test]
    fn brevity_penalty_closed_form() {
        let b = bleu_n(&words("a b"), &words("a b c d"), 1).unwrap();
        assert_eq!(b, (-1.0f64).exp());
        let s = BleuStats::from_pair(&words("a b c"), &words("a b c d e f"));
        assert_eq!(s.brevity_penalty(), (1.0f64 - 2.0).exp());
        assert_eq!(BleuStats::from_pair(&words("a b c d"), &words("a")).brevity_penalty(), 1.0);
    }

    #[test]
    fn identical_pairs_score_full_marks() {
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = vec![(vec![1, 2, 3, 4, 5], vec![1, 2, 3, 4, 5]), (vec![7], vec![7])];
        for (c, r) in &pairs {
            for n in 1..=4 {
                assert_eq!(bleu_n(c, r, n).unwrap(), 1.0);
            }
        }
        let refs: Vec<(&[u32], &[u32])> = pairs.iter().map(|(c, r)| (c.as_slice(), r.as_slice())).collect();
        assert_eq!(average_bleu(&refs), 100.0);
    }

    #[test]
    fn no_overlap_uses_smoothed_closed_form() {
        let c = [1u32, 2, 3];
        let r = [4u32, 5, 6, 7];
        let bp = (1.0f64 - 4.0 / 3.0).exp();
        // p1 = 0/3; p2 = 1/(2+1); p3 = 1/(1+1); p4 = 1/(0+1)
        let expected = 100.0 * bp * (0.0 + 1.0 / 3.0 + 1.0 / 2.0 + 1.0) / 4.0;
        let got = average_bleu(&[(&c[..], &r[..])]);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn empty_candidate_scores_zero() {
        let empty: [u32; 0] = [];
        for n in 1..=4 {
            assert_eq!(bleu_n(&empty, &[1, 2], n).unwrap(), 0.0);
        }
        assert!(matches!(bleu_n(&[1], &[1], 5), Err(MetricsError::Order(5))));
    }

    #[test]
    fn ngram_totals() {
        let t = [1, 2, 1, 2, 1];
        for n in 1..=6 {
            let total: usize = ngram_counts(&t, n).values().sum();
            assert_eq!(total, t.len().saturating_sub(n - 1));
        }
        assert_eq!(ngram_counts(&t, 2)[&[1, 2][..]], 2);
    }

    #[test]
    fn echo_model_report() {
        let m = Table { vocab: 8, rows: vec![] };
        let exs = vec![example(vec![1, 2, 3, 4, 7], 2), example(vec![5, 6, 6, 7], 1)];
        let report = evaluate_with(&m, &exs, |ex| Ok(reference_response(ex).to_vec())).unwrap();
        assert_eq!(report.average_bleu, 100.0);
        assert_eq!(report.example_count, 2);
        assert_eq!(report.token_count, 3 + 3);
        assert!((report.perplexity - 8.0).abs() < 1e-12);
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        for key in ["perplexity", "bleu_1", "bleu_2", "bleu_3", "bleu_4", "average_bleu", "token_count", "example_count"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let table = report.to_string();
        assert_eq!(table.lines().count(), 8);
        assert!(table.contains("average_bleu"));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn pairs() -> impl Strategy<Value = Vec<(Vec<u32>, Vec<u32>)>> {
            prop::collection::vec(
                (prop::collection::vec(0u32..6, 0..10), prop::collection::vec(0u32..6, 1..10)),
                1..8,
            )
        }

        fn refs(p: &[(Vec<u32>, Vec<u32>)]) -> Vec<(&[u32], &[u32])> {
            p.iter().map(|(c, r)| (c.as_slice(), r.as_slice())).collect()
        }

        proptest! {
            #[test]
            fn relabeling_ids_changes_nothing(p in pairs(), shift in 1u32..100) {
                let relabeled: Vec<_> = p
                    .iter()
                    .map(|(c, r)| {
                        let f = |v: &Vec<u32>| v.iter().map(|x| (x * 7 + shift) % 1000).collect::<Vec<_>>();
                        (f(c), f(r))
                    })
                    .collect();
                prop_assert_eq!(average_bleu(&refs(&p)), average_bleu(&refs(&relabeled)));
            }

            #[test]
            fn pooling_is_order_and_split_invariant(p in pairs(), cut in 0usize..8) {
                let whole = average_bleu(&refs(&p));
                let mut rev = p.clone();
                rev.reverse();
                prop_assert_eq!(whole, average_bleu(&refs(&rev)));

                let cut = cut.min(p.len());
                let mut a = BleuStats::default();
                for (c, r) in &p[..cut] {
                    a.add(&BleuStats::from_pair(c, r));
                }
                let mut b = BleuStats::default();
                for (c, r) in &p[cut..] {
                    b.add(&BleuStats::from_pair(c, r));
                }
                a.add(&b);
                prop_assert_eq!(a.average(), whole);
            }

            #[test]
            fn scores_are_bounded(p in pairs()) {
                let mut s = BleuStats::default();
                for (c, r) in &p {
                    s.add(&BleuStats::from_pair(c, r));
                }
                for v in s.scores() {
                    prop_assert!((0.0..=100.0).contains(&v));
                }
                let avg = s.average();
                prop_assert_eq!(avg, s.scores().iter().sum::<f64>() / 4.0);
            }
        }
    }
}
