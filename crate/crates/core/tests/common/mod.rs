#![allow(dead_code)]

use fastgen::attention::{strategy_for, CacheMode};
use fastgen::model::{ArchKind, Model, ModelConfig, SourceBatch, NUM_RESERVED};
use fastgen::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy(kind: ArchKind, layers: usize, dim: usize, vocab: usize, seed: u64) -> Model {
    let config = match kind {
        ArchKind::EncoderDecoder => ModelConfig::encoder_decoder(layers, dim, vocab),
        ArchKind::PrefixLm => ModelConfig::prefix_lm(layers, dim, vocab),
    };
    Model::new(seed, config).unwrap()
}

/// Non-reserved ids with lengths in `min_len..=max_len`.
pub fn random_sources(rng: &mut ChaCha8Rng, batch: usize, vocab: usize, min_len: usize, max_len: usize) -> Vec<Vec<u32>> {
    (0..batch)
        .map(|_| {
            let n = rng.gen_range(min_len..=max_len);
            (0..n).map(|_| rng.gen_range(NUM_RESERVED as u32..vocab as u32)).collect()
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Feeds `inputs[t]` (one id per row) at step `t + 1`, applying
/// `reorders[t]` after the step when present. Returns per-step logits.
pub fn rollout(
    model: &Model,
    sources: &[Vec<u32>],
    beam: usize,
    mode: CacheMode,
    inputs: &[Vec<u32>],
    reorders: &[Vec<usize>],
) -> Vec<Tensor> {
    let strategy = strategy_for(mode);
    let batch = SourceBatch::from_rows(sources);
    let mut caches = strategy.open(model, &batch, beam).unwrap();
    let mut out = Vec::new();
    for (t, y) in inputs.iter().enumerate() {
        out.push(model.decode_step(y, &mut caches, t + 1).unwrap());
        if let Some(idx) = reorders.get(t) {
            strategy.reorder(&mut caches, idx).unwrap();
        }
    }
    out
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

/// `log_softmax` in f64, independent of the library's kernel.
pub fn log_softmax_f64(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let lse = row.iter().map(|&x| ((x as f64) - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&x| x as f64 - lse).collect()
}

/// True when some n-gram occurs twice in `tokens`.
pub fn has_repeated_ngram(tokens: &[u32], n: usize) -> bool {
    if n == 0 || tokens.len() < n {
        return false;
    }
    let grams: Vec<&[u32]> = tokens.windows(n).collect();
    (0..grams.len()).any(|i| (i + 1..grams.len()).any(|j| grams[i] == grams[j]))
}
