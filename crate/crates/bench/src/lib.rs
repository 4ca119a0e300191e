//! Fixtures shared by the benchmarks.

use gem_core::model::{init_model, ModelConfig, ModelState};
use gem_core::trainer::{compose_batch, TrainConfig, TrainCorpus, TrainingBatch};
use gem_core::TokenId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 32,
        d_ff: 64,
        vocab_size: 512,
        max_positions: 128,
        dropout_rate: 0.1,
        seed: 1,
    }
}

pub fn default_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        ..ModelConfig::default()
    }
}

pub fn model(config: &ModelConfig) -> ModelState<f32> {
    init_model(config).expect("valid config")
}

/// Random documents of 20 to 60 tokens over the model's non-reserved ids.
pub fn corpus(vocab_size: usize, docs: usize, seed: u64) -> TrainCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs = (0..docs)
        .map(|_| {
            let len = rng.gen_range(20..=60);
            (0..len).map(|_| rng.gen_range(5..vocab_size as TokenId)).collect()
        })
        .collect();
    TrainCorpus::from_token_seqs(seqs).expect("non-empty corpus")
}

pub fn batch(corpus: &TrainCorpus, config: &TrainConfig, step: usize) -> TrainingBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(step as u64);
    compose_batch(corpus, config, &mut rng, step).expect("batch")
}
