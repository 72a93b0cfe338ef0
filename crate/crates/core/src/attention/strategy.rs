use std::sync::{Arc, OnceLock};

use super::{
    build_encdec_cache, build_prefix_cache, reorder_beams, BaselineSelfCache, CacheMode, CacheSet,
    DedupSelfCache, LayerCache, SelfCache,
};
use crate::error::Result;
use crate::model::{beam_free, ArchKind, Model, SourceBatch};
use crate::registry::Registry;
use crate::tensor::Tensor;

/// One way of holding attention state across decode steps.
pub trait CacheStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn mode(&self) -> CacheMode;

    /// Runs the conditioning pass (encoder or prefix) and builds the caches
    /// for `beam` hypotheses per source row.
    fn open(&self, model: &Model, sources: &SourceBatch, beam: usize) -> Result<CacheSet>;

    /// Consumes one token per row and returns logits `[B*M, V]`.
    fn step(&self, model: &Model, caches: &mut CacheSet, y_prev: &[u32]) -> Result<Tensor>;

    fn reorder(&self, caches: &mut CacheSet, beam_indices: &[usize]) -> Result<()> {
        reorder_beams(caches, beam_indices)
    }
}

/// Recomputes the whole sequence at every step.
#[derive(Debug, Default)]
pub struct NoCache;

/// Keys and values replicated for every beam.
#[derive(Debug, Default)]
pub struct BaselineCache;

/// Beam-invariant keys and values stored once per batch element.
#[derive(Debug, Default)]
pub struct DedupCache;

impl CacheStrategy for NoCache {
    fn name(&self) -> &'static str {
        "none"
    }

    fn mode(&self) -> CacheMode {
        CacheMode::None
    }

    fn open(&self, model: &Model, sources: &SourceBatch, beam: usize) -> Result<CacheSet> {
        let cond = model.condition(sources)?;
        Ok(CacheSet::uncached(sources.batch(), beam, cond))
    }

    fn step(&self, model: &Model, caches: &mut CacheSet, y_prev: &[u32]) -> Result<Tensor> {
        let (history, cond) = caches.history_mut();
        for (row, &tok) in history.iter_mut().zip(y_prev) {
            row.push(tok);
        }
        let cond = cond.expect("uncached session keeps its conditioning");
        let logits = model.decode_step_nocache(history, cond)?;
        caches.advance();
        Ok(logits)
    }
}

impl CacheStrategy for BaselineCache {
    fn name(&self) -> &'static str {
        "baseline"
    }

    fn mode(&self) -> CacheMode {
        CacheMode::Baseline
    }

    fn open(&self, model: &Model, sources: &SourceBatch, beam: usize) -> Result<CacheSet> {
        open_cached(model, sources, beam, CacheMode::Baseline)
    }

    fn step(&self, model: &Model, caches: &mut CacheSet, y_prev: &[u32]) -> Result<Tensor> {
        model.decode_step_cached(y_prev, caches)
    }
}

impl CacheStrategy for DedupCache {
    fn name(&self) -> &'static str {
        "dedup"
    }

    fn mode(&self) -> CacheMode {
        CacheMode::Dedup
    }

    fn open(&self, model: &Model, sources: &SourceBatch, beam: usize) -> Result<CacheSet> {
        open_cached(model, sources, beam, CacheMode::Dedup)
    }

    fn step(&self, model: &Model, caches: &mut CacheSet, y_prev: &[u32]) -> Result<Tensor> {
        model.decode_step_cached(y_prev, caches)
    }
}

fn open_cached(model: &Model, sources: &SourceBatch, beam: usize, mode: CacheMode) -> Result<CacheSet> {
    let batch = sources.batch();
    let d = model.config().embed_dim;
    let decoder = &model.weights().decoder;
    let lengths = sources.lengths();
    match model.config().kind {
        ArchKind::EncoderDecoder => {
            let enc = model.encode(sources)?;
            let memory = beam_free(&enc.hidden)?;
            let layers = decoder
                .iter()
                .map(|layer| {
                    let cross = layer
                        .cross_attn
                        .as_ref()
                        .map(|w| build_encdec_cache(&memory, &w.wk, &w.wv, mode, beam, lengths))
                        .transpose()?;
                    let self_attn = match mode {
                        CacheMode::Dedup => SelfCache::Dedup(DedupSelfCache::new(
                            Tensor::zeros(&[batch, 1, 0, d]),
                            Tensor::zeros(&[batch, 1, 0, d]),
                            &vec![0; batch],
                            beam,
                        )?),
                        _ => SelfCache::Baseline(BaselineSelfCache::new(batch * beam, d, beam)),
                    };
                    Ok(LayerCache {
                        self_attn,
                        cross_attn: cross,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CacheSet::with_layers(mode, batch, beam, layers, vec![0; batch]))
        }
        ArchKind::PrefixLm => {
            let states = model.encode_prefix(sources)?;
            let layers = decoder
                .iter()
                .zip(&states.layer_inputs)
                .map(|(layer, x)| {
                    let w = &layer.self_attn;
                    let (k, v) = build_prefix_cache(&beam_free(x)?, &w.wk, &w.wv)?;
                    let self_attn = match mode {
                        CacheMode::Dedup => SelfCache::Dedup(DedupSelfCache::new(k, v, lengths, beam)?),
                        _ => SelfCache::Baseline(BaselineSelfCache::from_prefix(&k, &v, lengths, beam)?),
                    };
                    Ok(LayerCache {
                        self_attn,
                        cross_attn: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CacheSet::with_layers(mode, batch, beam, layers, lengths.to_vec()))
        }
    }
}

/// Built-in cache strategies keyed by CLI name.
pub fn cache_strategies() -> &'static Registry<dyn CacheStrategy> {
    static REGISTRY: OnceLock<Registry<dyn CacheStrategy>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut reg: Registry<dyn CacheStrategy> = Registry::new("cache mode");
        reg.register("none", Arc::new(NoCache))
            .register("baseline", Arc::new(BaselineCache))
            .register("dedup", Arc::new(DedupCache));
        reg
    })
}

pub fn strategy_for(mode: CacheMode) -> Arc<dyn CacheStrategy> {
    cache_strategies()
        .get(mode.as_str())
        .expect("every cache mode has a registered strategy")
}
