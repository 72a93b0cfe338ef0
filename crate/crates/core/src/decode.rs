//! Beam search over a [`Model`] with a pluggable cache strategy and n-gram
//! kernel.
//!
//! Each step runs: decode step, log-softmax, the min-length eos ban, n-gram
//! blocking, top-k selection and cache reordering. Every hypothesis starts
//! from `bos`; step 1 consumes it. On step 1 only the first beam of each
//! group is alive, so the first expansion fans out into distinct tokens.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attention::{strategy_for, CacheMode, CacheSet, ReorderStats};
use crate::error::{Error, Result};
use crate::model::{Model, SourceBatch, BOS, EOS, PAD};
use crate::ngram::{ngram_kernels, BanSet, ScoreMatrix, TokenMatrix};
use crate::tensor::{log_softmax_rows, Tensor, MASKED};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NgramKernel {
    Reference,
    Parallel,
}

impl NgramKernel {
    pub const ALL: [NgramKernel; 2] = [NgramKernel::Reference, NgramKernel::Parallel];

    pub fn as_str(&self) -> &'static str {
        match self {
            NgramKernel::Reference => "reference",
            NgramKernel::Parallel => "parallel",
        }
    }
}

impl fmt::Display for NgramKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NgramKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kernel = ngram_kernels().get(s)?;
        NgramKernel::ALL
            .into_iter()
            .find(|k| k.as_str() == kernel.name())
            .ok_or_else(|| Error::Config(format!("n-gram kernel `{s}` has no config variant")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub beam_size: usize,
    pub no_repeat_ngram_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub length_penalty: f32,
    pub cache_mode: CacheMode,
    pub ngram_kernel: NgramKernel,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            beam_size: 4,
            no_repeat_ngram_size: 3,
            min_len: 0,
            max_len: 20,
            length_penalty: 1.0,
            cache_mode: CacheMode::Dedup,
            ngram_kernel: NgramKernel::Parallel,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            )));
        }
        if self.length_penalty.is_nan() || self.length_penalty < 0.0 {
            return Err(Error::Config("length penalty must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hypothesis {
    /// Generated tokens, ending in `eos` unless cut at `max_len`.
    pub tokens: Vec<u32>,
    /// `cum_logprob / len^lenpen`.
    pub score: f32,
    pub cum_logprob: f32,
    /// Selected log-probability at every step.
    pub step_logprobs: Vec<f32>,
}

impl Hypothesis {
    pub fn ends_with_eos(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

pub fn finalize_score(cum_logprob: f32, length: usize, lenpen: f32) -> f32 {
    cum_logprob / (length as f32).powf(lenpen)
}

/// Floors the eos score of every row while fewer than `min_len` tokens have
/// been generated.
pub fn ban_eos_below_min_len(scores: &mut ScoreMatrix, current_len: usize, min_len: usize) {
    if current_len < min_len && (EOS as usize) < scores.vocab() {
        for r in 0..scores.rows() {
            scores.row_mut(r)[EOS as usize] = MASKED;
        }
    }
}

/// Live beams of one generate call.
#[derive(Clone, Debug)]
pub struct BeamState {
    batch: usize,
    beam: usize,
    tokens: Vec<Vec<u32>>,
    step_logprobs: Vec<Vec<f32>>,
    cum_logprob: Vec<f32>,
    alive: Vec<bool>,
    finalized: Vec<Vec<Hypothesis>>,
    done: Vec<bool>,
}

impl BeamState {
    /// One live `bos` row per batch element; the other beams start dead.
    pub fn new(batch: usize, beam: usize) -> Self {
        let rows = batch * beam;
        BeamState {
            batch,
            beam,
            tokens: vec![Vec::new(); rows],
            step_logprobs: vec![Vec::new(); rows],
            cum_logprob: vec![0.0; rows],
            alive: (0..rows).map(|r| r % beam == 0).collect(),
            finalized: vec![Vec::new(); batch],
            done: vec![false; batch],
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.beam
    }

    pub fn tokens(&self, row: usize) -> &[u32] {
        &self.tokens[row]
    }

    pub fn cum_logprob(&self, row: usize) -> f32 {
        self.cum_logprob[row]
    }

    pub fn is_alive(&self, row: usize) -> bool {
        self.alive[row]
    }

    pub fn finalized(&self, batch: usize) -> &[Hypothesis] {
        &self.finalized[batch]
    }

    pub fn all_done(&self) -> bool {
        self.done.iter().all(|&d| d)
    }

    /// Generated tokens of alive rows; dead rows have valid length 0.
    pub fn token_matrix(&self) -> TokenMatrix {
        let cols = self.tokens.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(self.rows() * cols);
        let mut valid = Vec::with_capacity(self.rows());
        for (row, alive) in self.tokens.iter().zip(&self.alive) {
            ids.extend_from_slice(row);
            ids.extend(std::iter::repeat_n(PAD, cols - row.len()));
            valid.push(if *alive { row.len() } else { 0 });
        }
        TokenMatrix::new(self.rows(), cols, ids, valid).expect("consistent token matrix")
    }

    fn hypothesis(&self, row: usize, extra: Option<(u32, f32)>, lenpen: f32) -> Hypothesis {
        let mut tokens = self.tokens[row].clone();
        let mut step_logprobs = self.step_logprobs[row].clone();
        let mut cum = self.cum_logprob[row];
        if let Some((tok, lp)) = extra {
            tokens.push(tok);
            step_logprobs.push(lp);
            cum += lp;
        }
        Hypothesis {
            score: finalize_score(cum, tokens.len(), lenpen),
            tokens,
            cum_logprob: cum,
            step_logprobs,
        }
    }

    /// Finalizes every alive beam as-is (used at `max_len`).
    pub fn finalize_alive(&mut self, lenpen: f32) {
        for r in 0..self.rows() {
            let b = r / self.beam;
            if self.alive[r] && !self.done[b] {
                let hyp = self.hypothesis(r, None, lenpen);
                self.finalized[b].push(hyp);
            }
        }
        self.alive.iter_mut().for_each(|a| *a = false);
        self.done.iter_mut().for_each(|d| *d = true);
    }

    /// Best finalized hypothesis per batch element; the earliest wins ties.
    pub fn best(&self) -> Vec<Hypothesis> {
        self.finalized
            .iter()
            .map(|hyps| {
                hyps.iter()
                    .fold(None::<&Hypothesis>, |best, h| match best {
                        Some(b) if b.score >= h.score => Some(b),
                        _ => Some(h),
                    })
                    .cloned()
                    .unwrap_or(Hypothesis {
                        tokens: Vec::new(),
                        score: 0.0,
                        cum_logprob: 0.0,
                        step_logprobs: Vec::new(),
                    })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamParams {
    pub beam: usize,
    pub min_len: usize,
    pub lenpen: f32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepSelection {
    pub next_tokens: Vec<u32>,
    pub beam_indices: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    row: usize,
    token: u32,
    total: f32,
    logprob: f32,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.total
        .total_cmp(&a.total)
        .then(a.row.cmp(&b.row))
        .then(a.token.cmp(&b.token))
}

/// Selects the next beams of every unfinished batch group.
///
/// Candidates are `(alive row, token)` pairs not floored to [`MASKED`],
/// ranked by `cum_logprob + score` with ties going to the lower row, then
/// the lower token id. Of the best `2M`, eos candidates ranked within the
/// top `M` are finalized and the first `M` others become the new beams.
pub fn beam_step(scores: &ScoreMatrix, state: &mut BeamState, params: BeamParams) -> Result<StepSelection> {
    let m = params.beam;
    if m != state.beam || scores.rows() != state.rows() {
        return Err(Error::dim("beam_step", &[scores.rows(), m], &[state.rows(), state.beam]));
    }
    if !state.alive.iter().any(|&a| a) {
        return Err(Error::state("beam_step called with no alive rows"));
    }
    let rows = state.rows();
    let mut next_tokens = vec![PAD; rows];
    let mut beam_indices: Vec<usize> = (0..rows).map(|r| (r / m) * m).collect();
    let mut new_tokens = Vec::with_capacity(rows);
    let mut new_logprobs = Vec::with_capacity(rows);
    let mut new_cum = vec![0.0f32; rows];
    let mut new_alive = vec![false; rows];
    let mut pool: Vec<Candidate> = Vec::new();

    for g in 0..state.batch {
        let group = g * m..(g + 1) * m;
        let mut chosen: Vec<Candidate> = Vec::with_capacity(m);
        if !state.done[g] {
            pool.clear();
            for r in group.clone().filter(|&r| state.alive[r]) {
                let cum = state.cum_logprob[r];
                for (tok, &s) in scores.row(r).iter().enumerate() {
                    if s != MASKED {
                        pool.push(Candidate {
                            row: r,
                            token: tok as u32,
                            total: cum + s,
                            logprob: s,
                        });
                    }
                }
            }
            let keep = (2 * m).min(pool.len());
            if keep < pool.len() {
                pool.select_nth_unstable_by(keep, rank);
                pool.truncate(keep);
            }
            pool.sort_by(rank);
            for (rank, c) in pool.iter().enumerate() {
                if c.token == EOS {
                    if rank < m && state.tokens[c.row].len() >= params.min_len {
                        let hyp = state.hypothesis(c.row, Some((EOS, c.logprob)), params.lenpen);
                        state.finalized[g].push(hyp);
                    }
                } else if chosen.len() < m {
                    chosen.push(*c);
                }
            }
            if state.finalized[g].len() >= m || chosen.is_empty() {
                state.done[g] = true;
                chosen.clear();
            }
        }
        for (i, r) in group.enumerate() {
            match chosen.get(i) {
                Some(c) => {
                    let mut toks = state.tokens[c.row].clone();
                    toks.push(c.token);
                    let mut lps = state.step_logprobs[c.row].clone();
                    lps.push(c.logprob);
                    new_tokens.push(toks);
                    new_logprobs.push(lps);
                    new_cum[r] = c.total;
                    new_alive[r] = true;
                    next_tokens[r] = c.token;
                    beam_indices[r] = c.row;
                }
                None => {
                    let src = g * m;
                    let mut toks = state.tokens[src].clone();
                    toks.push(PAD);
                    new_tokens.push(toks);
                    new_logprobs.push(state.step_logprobs[src].clone());
                }
            }
        }
    }
    state.tokens = new_tokens;
    state.step_logprobs = new_logprobs;
    state.cum_logprob = new_cum;
    state.alive = new_alive;
    Ok(StepSelection {
        next_tokens,
        beam_indices,
    })
}

/// Wall-clock spent in each part of the generate loop.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub encode: Duration,
    pub decode: Duration,
    pub cache_maintenance: Duration,
    pub ngram_blocking: Duration,
    pub search_bookkeeping: Duration,
}

impl StageTimes {
    pub fn total(&self) -> Duration {
        self.encode + self.decode + self.cache_maintenance + self.ngram_blocking + self.search_bookkeeping
    }

    pub fn accumulate(&mut self, other: &StageTimes) {
        self.encode += other.encode;
        self.decode += other.decode;
        self.cache_maintenance += other.cache_maintenance;
        self.ngram_blocking += other.ngram_blocking;
        self.search_bookkeeping += other.search_bookkeeping;
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GenerateOptions {
    /// Keep per-step logits and cache snapshots in the result.
    pub trace: bool,
}

/// Per-step record kept when tracing.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub logits: Tensor,
    pub element_count: usize,
    pub shared_fingerprint: u64,
    pub bans: BanSet,
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub hypotheses: Vec<Hypothesis>,
    pub steps: usize,
    pub times: StageTimes,
    pub element_count: usize,
    pub reorder: ReorderStats,
    /// Padded source width `N` seen by the caches.
    pub source_width: usize,
    pub trace: Vec<StepTrace>,
}

/// Best hypothesis per source row.
pub fn generate(model: &Model, sources: &[Vec<u32>], config: &GenerationConfig) -> Result<Vec<Hypothesis>> {
    Ok(generate_with(model, sources, config, GenerateOptions::default())?.hypotheses)
}

pub fn generate_with(
    model: &Model,
    sources: &[Vec<u32>],
    config: &GenerationConfig,
    options: GenerateOptions,
) -> Result<Generation> {
    config.validate()?;
    let m = config.beam_size;
    let batch = SourceBatch::from_rows(sources);
    let mut generation = Generation {
        hypotheses: Vec::new(),
        steps: 0,
        times: StageTimes::default(),
        element_count: 0,
        reorder: ReorderStats::default(),
        source_width: batch.width(),
        trace: Vec::new(),
    };
    if sources.is_empty() {
        return Ok(generation);
    }
    let strategy = strategy_for(config.cache_mode);
    let blocker = ngram_kernels().get(config.ngram_kernel.as_str())?;
    let params = BeamParams {
        beam: m,
        min_len: config.min_len,
        lenpen: config.length_penalty,
    };
    let times = &mut generation.times;

    let clock = Instant::now();
    let mut caches: CacheSet = strategy.open(model, &batch, m)?;
    times.encode += clock.elapsed();

    let mut state = BeamState::new(batch.batch(), m);
    let mut y_prev = vec![BOS; batch.batch() * m];
    for t in 1..=config.max_len {
        let clock = Instant::now();
        let logits = model.decode_step(&y_prev, &mut caches, t)?;
        times.decode += clock.elapsed();

        let clock = Instant::now();
        let mut scores = ScoreMatrix::try_from(log_softmax_rows(&logits)?)?;
        for r in 0..scores.rows() {
            let row = scores.row_mut(r);
            row[PAD as usize] = MASKED;
            row[BOS as usize] = MASKED;
        }
        ban_eos_below_min_len(&mut scores, t - 1, config.min_len);
        times.search_bookkeeping += clock.elapsed();

        let clock = Instant::now();
        let tokens = state.token_matrix();
        let bans = blocker.ban(&tokens, &mut scores, config.no_repeat_ngram_size);
        times.ngram_blocking += clock.elapsed();

        let clock = Instant::now();
        let selection = beam_step(&scores, &mut state, params)?;
        times.search_bookkeeping += clock.elapsed();

        let clock = Instant::now();
        strategy.reorder(&mut caches, &selection.beam_indices)?;
        times.cache_maintenance += clock.elapsed();

        generation.steps = t;
        if options.trace {
            generation.trace.push(StepTrace {
                logits,
                element_count: caches.element_count(),
                shared_fingerprint: caches.shared_fingerprint(),
                bans,
            });
        }
        y_prev = selection.next_tokens;
        if state.all_done() {
            break;
        }
    }
    let clock = Instant::now();
    state.finalize_alive(config.length_penalty);
    generation.hypotheses = state.best();
    times.search_bookkeeping += clock.elapsed();
    generation.element_count = caches.element_count();
    generation.reorder = caches.reorder_stats();
    Ok(generation)
}
