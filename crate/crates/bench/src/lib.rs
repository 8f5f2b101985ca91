//! Deterministic fixtures shared by the benchmarks.

use protlm::data::family_corpus;
use protlm::model::EncoderConfig;
use protlm::tensor::Tensor;
use protlm::tokenizer::{encode, TokenSequence};
use protlm::{EncoderModel, Rng};

/// `[rows, cols]` tensor of standard-normal values.
pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let data = (0..rows * cols).map(|_| rng.normal() as f32).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

pub fn random_scores(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = Rng::new(seed);
    let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0 || rng.bernoulli(0.2)).collect();
    let scores = labels
        .iter()
        .map(|&l| rng.normal() + if l { 1.0 } else { 0.0 })
        .collect();
    (scores, labels)
}

pub fn random_protein(len: usize, seed: u64) -> String {
    family_corpus(1, 1, len, len, 0.0, seed).expect("valid lengths")[0].sequence.clone()
}

/// The default-width encoder at the given token budget.
pub fn encoder(max_len: usize) -> EncoderModel {
    EncoderModel::new(EncoderConfig {
        max_len,
        ..Default::default()
    })
    .expect("valid config")
}

pub fn corpus(n: usize, min_len: usize, max_len: usize) -> Vec<String> {
    family_corpus(n, 4, min_len, max_len, 0.05, 1)
        .expect("valid lengths")
        .into_iter()
        .map(|r| r.sequence)
        .collect()
}

/// Encoded, equal-length batch of corpus sequences.
pub fn token_batch(seqs: &[String], max_len: usize) -> Vec<TokenSequence> {
    let tokens: Vec<TokenSequence> = seqs.iter().map(|s| encode(s, max_len).expect("fits")).collect();
    let len = tokens.iter().map(|t| t.true_length).max().unwrap_or(2);
    tokens.iter().map(|t| t.repadded(len).expect("fits")).collect()
}
