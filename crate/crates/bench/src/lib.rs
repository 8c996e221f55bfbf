//! Shared fixtures for the benchmarks.

use seedsmith_core::model::{encode_pairs, Example, ModelConfig, ModelState};
use seedsmith_core::seeding::build_training_pairs;
use seedsmith_core::textproc::TokenizedSentence;
use seedsmith_core::{synth, train_bpe, StopwordPolicy, SubwordVocab, TrainingPair};

pub struct Fixture {
    pub sentences: Vec<String>,
    pub vocab: SubwordVocab,
    pub pairs: Vec<TrainingPair>,
    pub examples: Vec<Example>,
}

/// Synthetic corpus, 4-seed pairs and a BPE vocabulary trained on them.
pub fn fixture(n: usize, merges: usize) -> Fixture {
    let sentences = synth::generate_corpus(n, 1);
    let tokenized: Vec<TokenizedSentence> = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| TokenizedSentence::new(s.clone(), i))
        .collect();
    let pairs = build_training_pairs(&tokenized, "train", 4, 1, 1, &StopwordPolicy::builtin())
        .expect("pairs")
        .pairs;
    let vocab = train_bpe(sentences.iter().map(String::as_str), merges).expect("bpe");
    let (examples, _) = encode_pairs(&vocab, &pairs, 64);
    Fixture {
        sentences,
        vocab,
        pairs,
        examples,
    }
}

pub fn model(vocab_size: usize, d_model: usize) -> ModelState<f32> {
    let cfg = ModelConfig {
        d_model,
        ff_dim: 2 * d_model,
        num_heads: 4,
        enc_layers: 2,
        dec_layers: 2,
        dropout: 0.1,
        max_positions: 64,
        vocab_size,
        label_smoothing: 0.1,
    };
    ModelState::new(cfg, 1).expect("model")
}
