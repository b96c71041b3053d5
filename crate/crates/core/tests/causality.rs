use coral_core::{DecoderWeights, ModelConfig, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn future_tokens_never_change_past_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut config = ModelConfig::toy(300);
    config.max_seq_len = 48;
    let mut changed_later = 0;
    for case in 0..100 {
        let weights = DecoderWeights::init(config.clone(), case).unwrap();
        let len = rng.random_range(2..=config.max_seq_len);
        let tokens: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..300)).collect();
        let i = rng.random_range(0..len - 1);
        let mut perturbed = tokens.clone();
        for t in &mut perturbed[i + 1..] {
            *t = (*t + rng.random_range(1..300)) % 300;
        }
        let a = weights.forward(&tokens, false, 0).unwrap();
        let b = weights.forward(&perturbed, false, 0).unwrap();
        let v = config.vocab_size;
        assert_eq!(a.data()[..(i + 1) * v], b.data()[..(i + 1) * v], "case {case}, prefix through {i}");
        changed_later += usize::from(a.data()[(i + 1) * v..] != b.data()[(i + 1) * v..]);
    }
    assert_eq!(changed_later, 100);
}
