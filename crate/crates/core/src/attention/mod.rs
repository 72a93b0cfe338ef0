//! Attention caches for incremental decoding.
//!
//! Rows of every `[B*M, ..]` tensor are grouped in contiguous blocks of `M`
//! beams per batch element. The baseline layout keeps one copy of every key
//! and value per beam. The dedup layout stores beam-invariant parts (prefix
//! keys/values of a prefix LM, encoder-derived keys/values) once per batch
//! element as `[B, 1, N, D]` and contracts against them with the broadcast
//! kernels, so only generated-token caches are ever reordered.

mod strategy;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use strategy::{cache_strategies, strategy_for, BaselineCache, CacheStrategy, DedupCache, NoCache};

use crate::error::{Error, Result};
use crate::model::{AttnWeights, Conditioning};
use crate::tensor::{
    beam_broadcast_pv, beam_broadcast_qk, bmm, bmm_nt, concat_last, concat_time, gather_rows,
    matmul, repeat_rows, softmax_rows, split_last, Tensor, MASKED,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    None,
    Baseline,
    Dedup,
}

impl CacheMode {
    pub const ALL: [CacheMode; 3] = [CacheMode::None, CacheMode::Baseline, CacheMode::Dedup];

    pub fn as_str(&self) -> &'static str {
        match self {
            CacheMode::None => "none",
            CacheMode::Baseline => "baseline",
            CacheMode::Dedup => "dedup",
        }
    }
}

impl fmt::Display for CacheMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CacheMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        cache_strategies().get(s).map(|strategy| strategy.mode())
    }
}

/// Intermediates of one attention step, all `[B*M, 1, ..]`.
#[derive(Clone, Debug)]
pub struct AttnStepTrace {
    /// Raw scores before scaling and masking.
    pub attn_w: Tensor,
    pub attn_prob: Tensor,
    pub attn_out: Tensor,
}

/// Which key positions fall in the beam-shared region and how many of them
/// are valid for each batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedSpan {
    pub width: usize,
    pub lengths: Vec<usize>,
}

impl SharedSpan {
    pub fn empty(batch: usize) -> Self {
        SharedSpan {
            width: 0,
            lengths: vec![0; batch],
        }
    }
}

/// Scales raw scores `[R, 1, L]` and masks padded shared positions.
fn scale_and_mask(scores: &Tensor, scale: f32, span: &SharedSpan, beam: usize) -> Tensor {
    let mut out = scores.clone();
    let l = out.last_dim();
    if l == 0 {
        return out;
    }
    for (r, row) in out.data_mut().chunks_mut(l).enumerate() {
        let valid = span.lengths[r / beam];
        for (j, s) in row.iter_mut().enumerate() {
            *s = if j < span.width && j >= valid {
                MASKED
            } else {
                *s * scale
            };
        }
    }
    out
}

fn scale_for(d: usize) -> f32 {
    1.0 / (d as f32).sqrt()
}

fn expect_rows(op: &'static str, x: &Tensor, rows: usize, d: usize) -> Result<()> {
    if x.shape() != [rows, 1, d] {
        return Err(Error::dim(op, x.shape(), &[rows, 1, d]));
    }
    Ok(())
}

/// Keys and values per beam row, `[B*M, L, D]`. `L` is the prefix width
/// plus generated steps for a prefix LM and just generated steps otherwise.
#[derive(Clone, Debug)]
pub struct BaselineSelfCache {
    pub k: Tensor,
    pub v: Tensor,
    pub span: SharedSpan,
    pub beam: usize,
    generated: usize,
}

impl BaselineSelfCache {
    pub fn new(rows: usize, d: usize, beam: usize) -> Self {
        BaselineSelfCache {
            k: Tensor::zeros(&[rows, 0, d]),
            v: Tensor::zeros(&[rows, 0, d]),
            span: SharedSpan::empty(rows / beam.max(1)),
            beam,
            generated: 0,
        }
    }

    /// Starts from prefix keys/values replicated once per beam.
    pub fn from_prefix(prefix_k: &Tensor, prefix_v: &Tensor, lengths: &[usize], beam: usize) -> Result<Self> {
        let s = prefix_k.shape();
        if s.len() != 4 || s[1] != 1 || prefix_v.shape() != s {
            return Err(Error::dim("BaselineSelfCache::from_prefix", s, prefix_v.shape()));
        }
        let (b, n, d) = (s[0], s[2], s[3]);
        let k = repeat_rows(&prefix_k.clone().reshape(&[b, n, d])?, beam);
        let v = repeat_rows(&prefix_v.clone().reshape(&[b, n, d])?, beam);
        Ok(BaselineSelfCache {
            k,
            v,
            span: SharedSpan {
                width: n,
                lengths: lengths.to_vec(),
            },
            beam,
            generated: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.k.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn generated(&self) -> usize {
        self.generated
    }

    pub fn element_count(&self) -> usize {
        self.k.numel() + self.v.numel()
    }
}

/// Prefix keys/values stored once per batch element plus per-beam caches of
/// the generated tokens.
#[derive(Clone, Debug)]
pub struct DedupSelfCache {
    /// `[B, 1, N, D]`, written once.
    pub prefix_k: Tensor,
    pub prefix_v: Tensor,
    /// `[B*M, t, D]`
    pub gen_k: Tensor,
    pub gen_v: Tensor,
    pub lengths: Vec<usize>,
    pub beam: usize,
}

impl DedupSelfCache {
    pub fn new(prefix_k: Tensor, prefix_v: Tensor, lengths: &[usize], beam: usize) -> Result<Self> {
        let s = prefix_k.shape().to_vec();
        if s.len() != 4 || s[1] != 1 || prefix_v.shape() != s.as_slice() || lengths.len() != s[0] {
            return Err(Error::dim("DedupSelfCache::new", &s, prefix_v.shape()));
        }
        let rows = s[0] * beam;
        Ok(DedupSelfCache {
            gen_k: Tensor::zeros(&[rows, 0, s[3]]),
            gen_v: Tensor::zeros(&[rows, 0, s[3]]),
            prefix_k,
            prefix_v,
            lengths: lengths.to_vec(),
            beam,
        })
    }

    pub fn prefix_width(&self) -> usize {
        self.prefix_k.shape()[2]
    }

    pub fn generated(&self) -> usize {
        self.gen_k.shape()[1]
    }

    pub fn element_count(&self) -> usize {
        self.prefix_k.numel() + self.prefix_v.numel() + self.gen_k.numel() + self.gen_v.numel()
    }

    pub fn prefix_fingerprint(&self) -> u64 {
        self.prefix_k.fingerprint() ^ self.prefix_v.fingerprint().rotate_left(1)
    }

    fn span(&self) -> SharedSpan {
        SharedSpan {
            width: self.prefix_width(),
            lengths: self.lengths.clone(),
        }
    }
}

/// Encoder-derived keys/values replicated per beam, `[B*M, N, D]`.
#[derive(Clone, Debug)]
pub struct BaselineEncDecCache {
    pub k: Tensor,
    pub v: Tensor,
    pub lengths: Vec<usize>,
    pub beam: usize,
}

/// Encoder-derived keys/values stored once per batch element, `[B, 1, N, D]`.
/// Never reordered.
#[derive(Clone, Debug)]
pub struct DedupEncDecCache {
    pub k: Tensor,
    pub v: Tensor,
    pub lengths: Vec<usize>,
    pub beam: usize,
}

impl DedupEncDecCache {
    pub fn fingerprint(&self) -> u64 {
        self.k.fingerprint() ^ self.v.fingerprint().rotate_left(1)
    }
}

/// Projects beam-free hidden states `[B, 1, N, D]` to prefix keys and values
/// of the same shape.
pub fn build_prefix_cache(x_hidden: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = x_hidden.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::dim("build_prefix_cache", s, wk.shape()));
    }
    Ok((matmul(x_hidden, wk)?, matmul(x_hidden, wv)?))
}

/// Cached self-attention step with per-beam caches.
pub fn self_attn_step_baseline(
    y_prev_hidden: &Tensor,
    cache: &mut BaselineSelfCache,
    w: &AttnWeights,
) -> Result<(Tensor, AttnStepTrace)> {
    let (rows, d) = (cache.k.shape()[0], cache.k.shape()[2]);
    expect_rows("self_attn_step_baseline", y_prev_hidden, rows, d)?;
    if cache.len() != cache.span.width + cache.generated || cache.v.shape() != cache.k.shape() {
        return Err(Error::state(format!(
            "baseline self cache holds {} positions, expected {}",
            cache.len(),
            cache.span.width + cache.generated
        )));
    }
    let q = matmul(y_prev_hidden, &w.wq)?;
    let k_new = matmul(y_prev_hidden, &w.wk)?;
    let v_new = matmul(y_prev_hidden, &w.wv)?;
    cache.k = concat_time(&cache.k, &k_new)?;
    cache.v = concat_time(&cache.v, &v_new)?;
    cache.generated += 1;

    let attn_w = bmm_nt(&q, &cache.k)?;
    let attn_prob = softmax_rows(&scale_and_mask(&attn_w, scale_for(d), &cache.span, cache.beam))?;
    let attn_out = bmm(&attn_prob, &cache.v)?;
    Ok((
        attn_out.clone(),
        AttnStepTrace {
            attn_w,
            attn_prob,
            attn_out,
        },
    ))
}

/// Self-attention step over split caches: scores against the shared prefix
/// come from the broadcast contraction, scores against generated tokens from
/// an ordinary product, and one softmax normalizes the concatenated row.
pub fn self_attn_step_dedup(
    y_prev_hidden: &Tensor,
    cache: &mut DedupSelfCache,
    w: &AttnWeights,
) -> Result<(Tensor, AttnStepTrace)> {
    let (b, n, d) = (
        cache.prefix_k.shape()[0],
        cache.prefix_width(),
        cache.prefix_k.shape()[3],
    );
    let m = cache.beam;
    let rows = b * m;
    expect_rows("self_attn_step_dedup", y_prev_hidden, rows, d)?;
    if cache.gen_k.shape()[0] != rows || cache.gen_v.shape() != cache.gen_k.shape() {
        return Err(Error::state(format!(
            "dedup self cache generated part {:?} does not match {rows} rows",
            cache.gen_k.shape()
        )));
    }
    let q = matmul(y_prev_hidden, &w.wq)?;
    let k_new = matmul(y_prev_hidden, &w.wk)?;
    let v_new = matmul(y_prev_hidden, &w.wv)?;
    cache.gen_k = concat_time(&cache.gen_k, &k_new)?;
    cache.gen_v = concat_time(&cache.gen_v, &v_new)?;

    let q_beams = q.clone().reshape(&[b, m, 1, d])?;
    let attn_w0 = beam_broadcast_qk(&q_beams, &cache.prefix_k)?.reshape(&[rows, 1, n])?;
    let attn_w1 = bmm_nt(&q, &cache.gen_k)?;
    let attn_w = concat_last(&attn_w0, &attn_w1)?;
    let attn_prob = softmax_rows(&scale_and_mask(&attn_w, scale_for(d), &cache.span(), m))?;
    let (prob0, prob1) = split_last(&attn_prob, n)?;
    let mut attn_out = beam_broadcast_pv(&prob0.reshape(&[b, m, 1, n])?, &cache.prefix_v)?
        .reshape(&[rows, 1, d])?;
    attn_out.add_assign(&bmm(&prob1, &cache.gen_v)?)?;
    Ok((
        attn_out.clone(),
        AttnStepTrace {
            attn_w,
            attn_prob,
            attn_out,
        },
    ))
}

#[derive(Clone, Debug)]
pub enum EncDecCache {
    Baseline(BaselineEncDecCache),
    Dedup(DedupEncDecCache),
}

/// Projects encoder states `[B, 1, N, D]` into the cross-attention cache.
/// Baseline replicates each batch row `beam` times; dedup keeps one copy.
pub fn build_encdec_cache(
    s: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    mode: CacheMode,
    beam: usize,
    lengths: &[usize],
) -> Result<EncDecCache> {
    let shape = s.shape();
    if shape.len() != 4 || shape[1] != 1 || lengths.len() != shape[0] {
        return Err(Error::dim("build_encdec_cache", shape, &[lengths.len()]));
    }
    let (b, n, d) = (shape[0], shape[2], shape[3]);
    let k = matmul(s, wk)?;
    let v = matmul(s, wv)?;
    match mode {
        CacheMode::Dedup => Ok(EncDecCache::Dedup(DedupEncDecCache {
            k,
            v,
            lengths: lengths.to_vec(),
            beam,
        })),
        CacheMode::Baseline => Ok(EncDecCache::Baseline(BaselineEncDecCache {
            k: repeat_rows(&k.reshape(&[b, n, d])?, beam),
            v: repeat_rows(&v.reshape(&[b, n, d])?, beam),
            lengths: lengths.to_vec(),
            beam,
        })),
        CacheMode::None => Err(Error::Config(
            "cache mode `none` keeps no encoder-decoder cache".into(),
        )),
    }
}

/// Cross-attention against the shared `[B, 1, N, D]` cache. The cache is
/// only read.
pub fn encdec_attn_step_dedup(
    q_in: &Tensor,
    cache: &DedupEncDecCache,
    wq: &Tensor,
) -> Result<(Tensor, AttnStepTrace)> {
    let (b, n, d) = (cache.k.shape()[0], cache.k.shape()[2], cache.k.shape()[3]);
    let m = cache.beam;
    let rows = b * m;
    expect_rows("encdec_attn_step_dedup", q_in, rows, d)?;
    let q = matmul(q_in, wq)?.reshape(&[b, m, 1, d])?;
    let attn_w = beam_broadcast_qk(&q, &cache.k)?.reshape(&[rows, 1, n])?;
    let span = SharedSpan {
        width: n,
        lengths: cache.lengths.clone(),
    };
    let attn_prob = softmax_rows(&scale_and_mask(&attn_w, scale_for(d), &span, m))?;
    let attn_out = beam_broadcast_pv(&attn_prob.clone().reshape(&[b, m, 1, n])?, &cache.v)?
        .reshape(&[rows, 1, d])?;
    Ok((
        attn_out.clone(),
        AttnStepTrace {
            attn_w,
            attn_prob,
            attn_out,
        },
    ))
}

/// Cross-attention against per-beam replicated keys and values.
pub fn encdec_attn_step_baseline(
    q_in: &Tensor,
    cache: &BaselineEncDecCache,
    wq: &Tensor,
) -> Result<(Tensor, AttnStepTrace)> {
    let (rows, n, d) = (cache.k.shape()[0], cache.k.shape()[1], cache.k.shape()[2]);
    expect_rows("encdec_attn_step_baseline", q_in, rows, d)?;
    let q = matmul(q_in, wq)?;
    let attn_w = bmm_nt(&q, &cache.k)?;
    let span = SharedSpan {
        width: n,
        lengths: cache.lengths.clone(),
    };
    let attn_prob = softmax_rows(&scale_and_mask(&attn_w, scale_for(d), &span, cache.beam))?;
    let attn_out = bmm(&attn_prob, &cache.v)?;
    Ok((
        attn_out.clone(),
        AttnStepTrace {
            attn_w,
            attn_prob,
            attn_out,
        },
    ))
}

#[derive(Clone, Debug)]
pub enum SelfCache {
    Baseline(BaselineSelfCache),
    Dedup(DedupSelfCache),
}

impl SelfCache {
    /// Runs one step; the scale argument must equal `1/sqrt(D)`.
    pub(crate) fn attend(&mut self, x: &Tensor, w: &AttnWeights, scale: f32) -> Result<(Tensor, AttnStepTrace)> {
        debug_assert_eq!(scale, scale_for(x.last_dim()));
        match self {
            SelfCache::Baseline(c) => self_attn_step_baseline(x, c, w),
            SelfCache::Dedup(c) => self_attn_step_dedup(x, c, w),
        }
    }

    pub fn element_count(&self) -> usize {
        match self {
            SelfCache::Baseline(c) => c.element_count(),
            SelfCache::Dedup(c) => c.element_count(),
        }
    }

    pub fn generated(&self) -> usize {
        match self {
            SelfCache::Baseline(c) => c.generated(),
            SelfCache::Dedup(c) => c.generated(),
        }
    }
}

impl EncDecCache {
    pub(crate) fn attend(&self, x: &Tensor, w: &AttnWeights, scale: f32) -> Result<(Tensor, AttnStepTrace)> {
        debug_assert_eq!(scale, scale_for(x.last_dim()));
        match self {
            EncDecCache::Baseline(c) => encdec_attn_step_baseline(x, c, &w.wq),
            EncDecCache::Dedup(c) => encdec_attn_step_dedup(x, c, &w.wq),
        }
    }

    pub fn element_count(&self) -> usize {
        match self {
            EncDecCache::Baseline(c) => c.k.numel() + c.v.numel(),
            EncDecCache::Dedup(c) => c.k.numel() + c.v.numel(),
        }
    }

    pub fn fingerprint(&self) -> u64 {
        match self {
            EncDecCache::Baseline(c) => c.k.fingerprint() ^ c.v.fingerprint().rotate_left(1),
            EncDecCache::Dedup(c) => c.fingerprint(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerCache {
    pub self_attn: SelfCache,
    pub cross_attn: Option<EncDecCache>,
}

/// Reorder work performed over a session.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ReorderStats {
    /// Self-attention tensors gathered (keys and values count separately).
    pub self_ops: usize,
    /// Encoder-decoder tensors gathered.
    pub encdec_ops: usize,
    pub self_elements: usize,
    pub encdec_elements: usize,
}

impl ReorderStats {
    pub fn total_ops(&self) -> usize {
        self.self_ops + self.encdec_ops
    }
}

/// All per-layer caches of one decoding session.
#[derive(Clone, Debug)]
pub struct CacheSet {
    mode: CacheMode,
    batch: usize,
    beam: usize,
    steps: usize,
    layers: Vec<LayerCache>,
    /// Position of the first generated token per batch element.
    offsets: Vec<usize>,
    /// Mode `none` only: full token history per row and the conditioning it
    /// is recomputed against.
    history: Vec<Vec<u32>>,
    conditioning: Option<Conditioning>,
    stats: ReorderStats,
}

impl CacheSet {
    pub(crate) fn with_layers(
        mode: CacheMode,
        batch: usize,
        beam: usize,
        layers: Vec<LayerCache>,
        offsets: Vec<usize>,
    ) -> Self {
        CacheSet {
            mode,
            batch,
            beam,
            steps: 0,
            layers,
            offsets,
            history: Vec::new(),
            conditioning: None,
            stats: ReorderStats::default(),
        }
    }

    pub(crate) fn uncached(batch: usize, beam: usize, conditioning: Conditioning) -> Self {
        CacheSet {
            mode: CacheMode::None,
            batch,
            beam,
            steps: 0,
            layers: Vec::new(),
            offsets: vec![0; batch],
            history: vec![Vec::new(); batch * beam],
            conditioning: Some(conditioning),
            stats: ReorderStats::default(),
        }
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn beam(&self) -> usize {
        self.beam
    }

    pub fn rows(&self) -> usize {
        self.batch * self.beam
    }

    /// Decode steps completed so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerCache] {
        &mut self.layers
    }

    pub(crate) fn advance(&mut self) {
        self.steps += 1;
    }

    pub(crate) fn next_positions(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|r| self.offsets[r / self.beam] + self.steps)
            .collect()
    }

    pub(crate) fn history_mut(&mut self) -> (&mut Vec<Vec<u32>>, Option<&Conditioning>) {
        (&mut self.history, self.conditioning.as_ref())
    }

    /// Live cached keys and values, in elements.
    pub fn element_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.self_attn.element_count() + l.cross_attn.as_ref().map_or(0, EncDecCache::element_count)
            })
            .sum()
    }

    pub fn reorder_stats(&self) -> ReorderStats {
        self.stats
    }

    pub fn reorder_op_count(&self) -> usize {
        self.stats.total_ops()
    }

    /// Fingerprint of everything that dedup mode treats as immutable: the
    /// shared prefix caches and the encoder-decoder caches.
    pub fn shared_fingerprint(&self) -> u64 {
        let mut acc = 0u64;
        for (i, layer) in self.layers.iter().enumerate() {
            if let SelfCache::Dedup(c) = &layer.self_attn {
                acc ^= c.prefix_fingerprint().rotate_left(i as u32 * 3);
            }
            if let Some(cross) = &layer.cross_attn {
                acc ^= cross.fingerprint().rotate_left(i as u32 * 3 + 1);
            }
        }
        acc
    }
}

fn check_beam_indices(beam_indices: &[usize], rows: usize, beam: usize) -> Result<()> {
    if beam_indices.len() != rows {
        return Err(Error::dim("reorder_beams", &[beam_indices.len()], &[rows]));
    }
    for (i, &src) in beam_indices.iter().enumerate() {
        if src >= rows || src / beam != i / beam {
            return Err(Error::Index {
                op: "reorder_beams",
                index: src,
                bound: rows,
            });
        }
    }
    Ok(())
}

/// Moves cache rows so that row `i` continues hypothesis `beam_indices[i]`.
///
/// Every gathered tensor counts as one reorder operation whether or not the
/// permutation is the identity.
pub fn reorder_beams(caches: &mut CacheSet, beam_indices: &[usize]) -> Result<()> {
    check_beam_indices(beam_indices, caches.rows(), caches.beam)?;
    let stats = &mut caches.stats;
    if caches.mode == CacheMode::None {
        caches.history = beam_indices.iter().map(|&i| caches.history[i].clone()).collect();
        return Ok(());
    }
    for layer in &mut caches.layers {
        match &mut layer.self_attn {
            SelfCache::Baseline(c) => {
                c.k = gather_rows(&c.k, beam_indices)?;
                c.v = gather_rows(&c.v, beam_indices)?;
                stats.self_ops += 2;
                stats.self_elements += c.k.numel() + c.v.numel();
            }
            SelfCache::Dedup(c) => {
                c.gen_k = gather_rows(&c.gen_k, beam_indices)?;
                c.gen_v = gather_rows(&c.gen_v, beam_indices)?;
                stats.self_ops += 2;
                stats.self_elements += c.gen_k.numel() + c.gen_v.numel();
            }
        }
        if let Some(EncDecCache::Baseline(c)) = &mut layer.cross_attn {
            c.k = gather_rows(&c.k, beam_indices)?;
            c.v = gather_rows(&c.v, beam_indices)?;
            stats.encdec_ops += 2;
            stats.encdec_elements += c.k.numel() + c.v.numel();
        }
    }
    Ok(())
}
