use std::collections::BTreeMap;
use std::io::Write;
use std::sync::mpsc::sync_channel;
use std::sync::{Arc, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use super::vocab::{detokenize, tokenize, Vocab};
use super::{PipelineConfig, WorkBatch};
use crate::decode::{generate_with, GenerateOptions, GenerationConfig, StageTimes};
use crate::error::{Error, Result};
use crate::model::{ArchKind, Model, EOS};
use crate::registry::Registry;

/// Span of busy time, measured from the start of the run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interval {
    pub start: Duration,
    pub end: Duration,
}

impl Interval {
    pub fn len(&self) -> Duration {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Length of the union of `spans`.
pub fn union_len(spans: &[Interval]) -> Duration {
    let mut sorted: Vec<Interval> = spans.iter().copied().filter(|i| !i.is_empty()).collect();
    sorted.sort_by_key(|i| i.start);
    let mut total = Duration::ZERO;
    let mut current: Option<Interval> = None;
    for span in sorted {
        match current.as_mut() {
            Some(cur) if span.start <= cur.end => cur.end = cur.end.max(span.end),
            _ => {
                if let Some(cur) = current.replace(span) {
                    total += cur.len();
                }
            }
        }
    }
    total + current.map_or(Duration::ZERO, |c| c.len())
}

/// Everything a runner needs for one pass over the corpus.
pub struct Job<'a> {
    pub model: &'a Model,
    pub generation: &'a GenerationConfig,
    pub config: &'a PipelineConfig,
    pub lines: &'a [String],
    pub vocab: &'a Vocab,
    pub out: &'a mut (dyn Write + Send),
    pub clock: Instant,
}

/// Busy intervals per stage plus the generate-loop breakdown.
#[derive(Clone, Debug, Default)]
pub struct Timeline {
    pub preprocess: Vec<Interval>,
    pub generate: Vec<Interval>,
    pub post_process: Vec<Interval>,
    pub stage_times: StageTimes,
    pub peak_cache_elements: usize,
    pub max_source_width: usize,
    pub max_steps: usize,
    pub batches: usize,
}

impl Timeline {
    fn absorb(&mut self, gen: &GeneratedBatch) {
        self.stage_times.accumulate(&gen.times);
        self.peak_cache_elements = self.peak_cache_elements.max(gen.cache_elements);
        self.max_source_width = self.max_source_width.max(gen.source_width);
        self.max_steps = self.max_steps.max(gen.steps);
        self.batches += 1;
    }
}

pub trait PipelineRunner: Send + Sync {
    fn name(&self) -> &'static str;

    fn run(&self, job: Job<'_>) -> Result<Timeline>;
}

/// Preprocess, generate and post-process each batch in turn.
#[derive(Debug, Default)]
pub struct SyncRunner;

/// Three stages joined by bounded queues of two batches.
#[derive(Debug, Default)]
pub struct AsyncRunner;

pub(crate) struct GeneratedBatch {
    batch_index: usize,
    hypotheses: Vec<Vec<u32>>,
    times: StageTimes,
    cache_elements: usize,
    source_width: usize,
    steps: usize,
}

/// Model input for one line: encoder sources end in eos; prefixes leave
/// room for `max_len` generated positions.
pub fn prepare_source(line: &str, vocab: &Vocab, model: &Model, max_len: usize) -> Vec<u32> {
    let max_positions = model.config().max_positions;
    match model.config().kind {
        ArchKind::EncoderDecoder => {
            let mut ids = tokenize(line, vocab, max_positions);
            ids.push(EOS);
            ids
        }
        ArchKind::PrefixLm => {
            let mut ids = tokenize(line, vocab, max_positions);
            ids.truncate(max_positions.saturating_sub(max_len));
            ids
        }
    }
}

fn span(clock: Instant, start: Instant) -> Interval {
    Interval {
        start: start - clock,
        end: clock.elapsed(),
    }
}

struct Preprocessor<'a> {
    model: &'a Model,
    lines: &'a [String],
    vocab: &'a Vocab,
    batch_size: usize,
    max_len: usize,
}

impl Preprocessor<'_> {
    fn batches(&self) -> usize {
        self.lines.len().div_ceil(self.batch_size)
    }

    fn batch(&self, batch_index: usize) -> WorkBatch {
        let first = batch_index * self.batch_size;
        let last = (first + self.batch_size).min(self.lines.len());
        WorkBatch {
            batch_index,
            sample_indices: (first..last).collect(),
            sources: self.lines[first..last]
                .iter()
                .map(|l| prepare_source(l, self.vocab, self.model, self.max_len))
                .collect(),
        }
    }
}

impl<'a> Job<'a> {
    fn preprocessor(&self) -> Preprocessor<'a> {
        Preprocessor {
            model: self.model,
            lines: self.lines,
            vocab: self.vocab,
            batch_size: self.config.batch_size,
            max_len: self.generation.max_len,
        }
    }
}

fn generate_batch(model: &Model, generation: &GenerationConfig, batch: WorkBatch) -> Result<GeneratedBatch> {
    let out = generate_with(model, &batch.sources, generation, GenerateOptions::default())?;
    Ok(GeneratedBatch {
        batch_index: batch.batch_index,
        hypotheses: out.hypotheses.into_iter().map(|h| h.tokens).collect(),
        times: out.times,
        cache_elements: out.element_count,
        source_width: out.source_width,
        steps: out.steps,
    })
}

fn post_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("post-process pool: {e}")))
}

fn detokenize_batch(pool: &rayon::ThreadPool, vocab: &Vocab, batch: &GeneratedBatch, delay: Duration) -> Vec<String> {
    let lines = pool.install(|| batch.hypotheses.par_iter().map(|h| detokenize(h, vocab)).collect());
    if !delay.is_zero() {
        thread::sleep(delay);
    }
    lines
}

fn write_lines(out: &mut dyn Write, lines: &[String]) -> Result<()> {
    for line in lines {
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

impl PipelineRunner for SyncRunner {
    fn name(&self) -> &'static str {
        "sync"
    }

    fn run(&self, job: Job<'_>) -> Result<Timeline> {
        let pool = post_pool(job.config.post_process_workers)?;
        let delay = job.config.injected_post_delay;
        let mut timeline = Timeline::default();
        let pre = job.preprocessor();
        for i in 0..pre.batches() {
            let start = Instant::now();
            let batch = pre.batch(i);
            timeline.preprocess.push(span(job.clock, start));

            let start = Instant::now();
            let gen = generate_batch(job.model, job.generation, batch)?;
            timeline.generate.push(span(job.clock, start));
            timeline.absorb(&gen);

            let start = Instant::now();
            let lines = detokenize_batch(&pool, job.vocab, &gen, delay);
            write_lines(job.out, &lines)?;
            timeline.post_process.push(span(job.clock, start));
        }
        job.out.flush()?;
        Ok(timeline)
    }
}

impl PipelineRunner for AsyncRunner {
    fn name(&self) -> &'static str {
        "async"
    }

    fn run(&self, job: Job<'_>) -> Result<Timeline> {
        const QUEUE_DEPTH: usize = 2;
        let pool = post_pool(job.config.post_process_workers)?;
        let delay = job.config.injected_post_delay;
        let pre = job.preprocessor();
        let batches = pre.batches();
        let (work_tx, work_rx) = sync_channel::<WorkBatch>(QUEUE_DEPTH);
        let (done_tx, done_rx) = sync_channel::<GeneratedBatch>(QUEUE_DEPTH);
        let Job {
            model,
            generation,
            vocab,
            out,
            clock,
            ..
        } = job;

        thread::scope(|s| {
            let pre = s.spawn(move || {
                let mut spans = Vec::with_capacity(batches);
                for i in 0..batches {
                    let start = Instant::now();
                    let batch = pre.batch(i);
                    spans.push(span(clock, start));
                    if work_tx.send(batch).is_err() {
                        break;
                    }
                }
                spans
            });
            let gen = s.spawn(move || -> Result<(Vec<Interval>, Timeline)> {
                let mut spans = Vec::with_capacity(batches);
                let mut stats = Timeline::default();
                for batch in work_rx {
                    let start = Instant::now();
                    let out = generate_batch(model, generation, batch)?;
                    spans.push(span(clock, start));
                    stats.absorb(&out);
                    if done_tx.send(out).is_err() {
                        break;
                    }
                }
                Ok((spans, stats))
            });
            let post = s.spawn(move || -> Result<Vec<Interval>> {
                let mut spans = Vec::with_capacity(batches);
                let mut pending: BTreeMap<usize, Vec<String>> = BTreeMap::new();
                let mut next = 0usize;
                for batch in done_rx {
                    let start = Instant::now();
                    let lines = detokenize_batch(&pool, vocab, &batch, delay);
                    pending.insert(batch.batch_index, lines);
                    while let Some(lines) = pending.remove(&next) {
                        write_lines(out, &lines)?;
                        next += 1;
                    }
                    spans.push(span(clock, start));
                }
                out.flush()?;
                Ok(spans)
            });
            let pre_spans = pre.join().map_err(|_| Error::state("preprocess stage panicked"))?;
            let (gen_spans, mut timeline) = gen.join().map_err(|_| Error::state("generation stage panicked"))??;
            let post_spans = post.join().map_err(|_| Error::state("post-process stage panicked"))??;
            timeline.preprocess = pre_spans;
            timeline.generate = gen_spans;
            timeline.post_process = post_spans;
            Ok(timeline)
        })
    }
}

/// Built-in runners keyed by pipeline mode name.
pub fn pipeline_runners() -> &'static Registry<dyn PipelineRunner> {
    static REGISTRY: OnceLock<Registry<dyn PipelineRunner>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut reg: Registry<dyn PipelineRunner> = Registry::new("pipeline mode");
        reg.register("sync", Arc::new(SyncRunner))
            .register("async", Arc::new(AsyncRunner));
        reg
    })
}
