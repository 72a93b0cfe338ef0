//! Analytic key/value cache memory model.

use serde::{Deserialize, Serialize};

use crate::attention::CacheMode;
use crate::error::{Error, Result};
use crate::model::ArchKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModelInput {
    pub batch: usize,
    pub beam: usize,
    /// Maximum source / prefix length.
    pub source_len: usize,
    /// Output length.
    pub target_len: usize,
    pub embed_dim: usize,
    pub decoder_layers: usize,
    pub bytes_per_element: usize,
    pub kind: ArchKind,
    pub cache_mode: CacheMode,
}

impl MemoryModelInput {
    /// The large summarization setting: 12 decoder layers of width 1024,
    /// 1024 source tokens, 50 output tokens, half precision.
    pub fn bart_large(batch: usize, cache_mode: CacheMode) -> Self {
        MemoryModelInput {
            batch,
            beam: 4,
            source_len: 1024,
            target_len: 50,
            embed_dim: 1024,
            decoder_layers: 12,
            bytes_per_element: 2,
            kind: ArchKind::EncoderDecoder,
            cache_mode,
        }
    }

    pub fn with_mode(self, cache_mode: CacheMode) -> Self {
        MemoryModelInput { cache_mode, ..self }
    }

    pub fn with_batch(self, batch: usize) -> Self {
        MemoryModelInput { batch, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.embed_dim == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("beam, embed_dim and decoder_layers must be positive".into()));
        }
        if !matches!(self.bytes_per_element, 2 | 4) {
            return Err(Error::Config(format!(
                "bytes_per_element must be 2 or 4, got {}",
                self.bytes_per_element
            )));
        }
        Ok(())
    }

    /// Cached numbers held per batch element at step `target_len`.
    fn elements_per_sample(&self) -> u128 {
        let m = self.beam as u128;
        let n = self.source_len as u128;
        let t = self.target_len as u128;
        let d = self.embed_dim as u128;
        let per_layer = match (self.cache_mode, self.kind) {
            (CacheMode::None, _) => 0,
            (CacheMode::Baseline, ArchKind::EncoderDecoder) => m * n * d + m * t * d,
            (CacheMode::Baseline, ArchKind::PrefixLm) => m * (n + t) * d,
            (CacheMode::Dedup, _) => n * d + m * t * d,
        };
        self.decoder_layers as u128 * 2 * per_layer
    }
}

/// Peak cached key+value bytes after `target_len` steps.
pub fn cache_bytes(input: &MemoryModelInput) -> u128 {
    input.batch as u128 * input.elements_per_sample() * input.bytes_per_element as u128
}

/// Largest batch whose cache fits in `budget_bytes`. A strategy that holds
/// no cache is unbounded and reports `usize::MAX`.
pub fn max_batch_under_budget(budget_bytes: u128, template: &MemoryModelInput) -> usize {
    let per_sample = template.with_batch(1);
    let cost = cache_bytes(&per_sample);
    if cost == 0 {
        return usize::MAX;
    }
    usize::try_from(budget_bytes / cost).unwrap_or(usize::MAX)
}

/// Baseline and dedup byte counts for the same shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CacheComparison {
    pub baseline: u128,
    pub dedup: u128,
}

impl CacheComparison {
    pub fn of(input: &MemoryModelInput) -> Self {
        CacheComparison {
            baseline: cache_bytes(&input.with_mode(CacheMode::Baseline)),
            dedup: cache_bytes(&input.with_mode(CacheMode::Dedup)),
        }
    }

    pub fn reduction_factor(&self) -> f64 {
        if self.dedup == 0 {
            return 1.0;
        }
        self.baseline as f64 / self.dedup as f64
    }
}
