//! Batch generation over text files, run serially or as a three-stage
//! pipeline (tokenize, generate, detokenize+write).

mod runner;
mod vocab;

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use runner::{
    pipeline_runners, prepare_source, union_len, AsyncRunner, Interval, Job, PipelineRunner, SyncRunner,
    Timeline,
};
pub use vocab::{build_vocab, detokenize, tokenize, Vocab};

use crate::decode::GenerationConfig;
use crate::error::{Error, Result};
use crate::model::{ArchKind, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    Sync,
    Async,
}

impl PipelineMode {
    pub const ALL: [PipelineMode; 2] = [PipelineMode::Sync, PipelineMode::Async];

    pub fn as_str(&self) -> &'static str {
        match self {
            PipelineMode::Sync => "sync",
            PipelineMode::Async => "async",
        }
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let runner = pipeline_runners().get(s)?;
        PipelineMode::ALL
            .into_iter()
            .find(|m| m.as_str() == runner.name())
            .ok_or_else(|| Error::Config(format!("pipeline mode `{s}` has no config variant")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    pub batch_size: usize,
    pub post_process_workers: usize,
    /// Extra sleep added to every batch's post-process.
    pub injected_post_delay: Duration,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: PipelineMode::Async,
            batch_size: 8,
            post_process_workers: 2,
            injected_post_delay: Duration::ZERO,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.post_process_workers == 0 {
            return Err(Error::Config("post-process workers must be at least 1".into()));
        }
        Ok(())
    }
}

/// One contiguous slice of the input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkBatch {
    pub batch_index: usize,
    /// Input line numbers, strictly increasing.
    pub sample_indices: Vec<usize>,
    pub sources: Vec<Vec<u32>>,
}

impl WorkBatch {
    pub fn lengths(&self) -> Vec<usize> {
        self.sources.iter().map(Vec::len).collect()
    }
}

/// Seconds spent per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageBreakdown {
    pub model_load: f64,
    pub preprocess: f64,
    pub encode: f64,
    pub decode: f64,
    pub cache_maintenance: f64,
    pub ngram_blocking: f64,
    pub search_bookkeeping: f64,
    pub post_process: f64,
    pub other: f64,
}

impl StageBreakdown {
    pub fn entries(&self) -> [(&'static str, f64); 9] {
        [
            ("model_load", self.model_load),
            ("preprocess", self.preprocess),
            ("encode", self.encode),
            ("decode", self.decode),
            ("cache_maintenance", self.cache_maintenance),
            ("ngram_blocking", self.ngram_blocking),
            ("search_bookkeeping", self.search_bookkeeping),
            ("post_process", self.post_process),
            ("other", self.other),
        ]
    }

    /// Sum of every stage except `model_load`.
    pub fn run_total(&self) -> f64 {
        self.entries()
            .iter()
            .filter(|(name, _)| *name != "model_load")
            .map(|(_, s)| s)
            .sum()
    }

    pub fn accumulate(&mut self, other: &StageBreakdown) {
        self.model_load += other.model_load;
        self.preprocess += other.preprocess;
        self.encode += other.encode;
        self.decode += other.decode;
        self.cache_maintenance += other.cache_maintenance;
        self.ngram_blocking += other.ngram_blocking;
        self.search_bookkeeping += other.search_bookkeeping;
        self.post_process += other.post_process;
        self.other += other.other;
    }

    pub fn scaled(&self, factor: f64) -> StageBreakdown {
        StageBreakdown {
            model_load: self.model_load * factor,
            preprocess: self.preprocess * factor,
            encode: self.encode * factor,
            decode: self.decode * factor,
            cache_maintenance: self.cache_maintenance * factor,
            ngram_blocking: self.ngram_blocking * factor,
            search_bookkeeping: self.search_bookkeeping * factor,
            post_process: self.post_process * factor,
            other: self.other * factor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub mode: PipelineMode,
    pub samples: usize,
    pub batches: usize,
    pub stages: StageBreakdown,
    /// Wall time of the run, model loading excluded.
    pub end_to_end_seconds: f64,
    pub samples_per_second: f64,
    /// Busy time beyond the union of busy intervals; 0 when stages never
    /// run at the same time.
    pub overlap_seconds: f64,
    /// Largest cached key/value element count at the end of any batch.
    pub peak_cache_elements: usize,
    pub max_source_width: usize,
    pub max_steps: usize,
}

fn report_from(mode: PipelineMode, samples: usize, timeline: &Timeline, prelude: Interval, wall: Duration) -> PipelineReport {
    let secs = |d: Duration| d.as_secs_f64();
    let sum = |spans: &[Interval]| spans.iter().map(Interval::len).sum::<Duration>();
    let mut busy: Vec<Interval> = vec![prelude];
    busy.extend_from_slice(&timeline.preprocess);
    busy.extend_from_slice(&timeline.generate);
    busy.extend_from_slice(&timeline.post_process);
    let busy_total: Duration = busy.iter().map(Interval::len).sum();
    let union = union_len(&busy);
    let generate = sum(&timeline.generate);
    let st = &timeline.stage_times;
    let residual = generate.saturating_sub(st.total());
    let stages = StageBreakdown {
        model_load: 0.0,
        preprocess: secs(prelude.len() + sum(&timeline.preprocess)),
        encode: secs(st.encode),
        decode: secs(st.decode),
        cache_maintenance: secs(st.cache_maintenance),
        ngram_blocking: secs(st.ngram_blocking),
        search_bookkeeping: secs(st.search_bookkeeping),
        post_process: secs(sum(&timeline.post_process)),
        other: secs(wall.saturating_sub(union) + residual),
    };
    let end_to_end = secs(wall);
    PipelineReport {
        mode,
        samples,
        batches: timeline.batches,
        stages,
        end_to_end_seconds: end_to_end,
        samples_per_second: if end_to_end > 0.0 { samples as f64 / end_to_end } else { 0.0 },
        overlap_seconds: secs(busy_total.saturating_sub(union)),
        peak_cache_elements: timeline.peak_cache_elements,
        max_source_width: timeline.max_source_width,
        max_steps: timeline.max_steps,
    }
}

fn check_lengths(model: &Model, generation: &GenerationConfig) -> Result<()> {
    let max_positions = model.config().max_positions;
    let limit = match model.config().kind {
        ArchKind::EncoderDecoder => max_positions,
        ArchKind::PrefixLm => max_positions.saturating_sub(1),
    };
    if generation.max_len > limit {
        return Err(Error::Config(format!(
            "max_len {} does not fit in {} positions",
            generation.max_len, max_positions
        )));
    }
    Ok(())
}

/// Runs the pipeline over in-memory lines, writing one hypothesis per line
/// to `out`. The vocabulary is built from `lines` and counted as
/// preprocess.
pub fn run_pipeline_on(
    lines: &[String],
    out: &mut (dyn Write + Send),
    model: &Model,
    generation: &GenerationConfig,
    config: &PipelineConfig,
) -> Result<PipelineReport> {
    let clock = Instant::now();
    run_from(clock, lines, out, model, generation, config)
}

fn run_from(
    clock: Instant,
    lines: &[String],
    out: &mut (dyn Write + Send),
    model: &Model,
    generation: &GenerationConfig,
    config: &PipelineConfig,
) -> Result<PipelineReport> {
    config.validate()?;
    generation.validate()?;
    check_lengths(model, generation)?;
    let runner = pipeline_runners().get(config.mode.as_str())?;
    let vocab = build_vocab(lines, model.config().vocab_size);
    let prelude = Interval {
        start: Duration::ZERO,
        end: clock.elapsed(),
    };
    let timeline = runner.run(Job {
        model,
        generation,
        config,
        lines,
        vocab: &vocab,
        out,
        clock,
    })?;
    let wall = clock.elapsed();
    Ok(report_from(config.mode, lines.len(), &timeline, prelude, wall))
}

/// Reads `input` (one sample per line) and writes hypotheses to `output`.
pub fn run_pipeline(
    input: &Path,
    output: &Path,
    model: &Model,
    generation: &GenerationConfig,
    config: &PipelineConfig,
) -> Result<PipelineReport> {
    let clock = Instant::now();
    let text = fs::read_to_string(input)?;
    let lines: Vec<String> = text.lines().map(str::to_owned).collect();
    let mut out = BufWriter::new(fs::File::create(output)?);
    run_from(clock, &lines, &mut out, model, generation, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> (Model, GenerationConfig) {
        let model = Model::new(3, ModelConfig::encoder_decoder(1, 8, 32)).unwrap();
        let gen = GenerationConfig {
            beam_size: 2,
            max_len: 6,
            ..GenerationConfig::default()
        };
        (model, gen)
    }

    fn corpus(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{} w{} w{}", i % 7, (i * 3) % 5, i % 2)).collect()
    }

    fn run(lines: &[String], mode: PipelineMode, workers: usize) -> (String, PipelineReport) {
        let (model, gen) = tiny();
        let config = PipelineConfig {
            mode,
            batch_size: 3,
            post_process_workers: workers,
            injected_post_delay: Duration::ZERO,
        };
        let mut out = Vec::new();
        let report = run_pipeline_on(lines, &mut out, &model, &gen, &config).unwrap();
        (String::from_utf8(out).unwrap(), report)
    }

    #[test]
    fn modes_and_workers_agree() {
        let lines = corpus(10);
        let (reference, report) = run(&lines, PipelineMode::Sync, 1);
        assert_eq!(reference.lines().count(), 10);
        assert_eq!(report.batches, 4);
        for (mode, workers) in [(PipelineMode::Sync, 4), (PipelineMode::Async, 1), (PipelineMode::Async, 4)] {
            assert_eq!(run(&lines, mode, workers).0, reference, "{mode} x{workers}");
        }
    }

    #[test]
    fn empty_input() {
        let (out, report) = run(&[], PipelineMode::Async, 2);
        assert!(out.is_empty());
        assert_eq!(report.batches, 0);
        assert_eq!(report.samples, 0);
    }

    #[test]
    fn sync_has_no_overlap() {
        let (_, report) = run(&corpus(7), PipelineMode::Sync, 2);
        assert_eq!(report.overlap_seconds, 0.0);
        let total = report.stages.run_total();
        assert!(total <= report.end_to_end_seconds + 1e-6, "{total} {}", report.end_to_end_seconds);
    }

    #[test]
    fn stage_sum_is_wall_plus_overlap() {
        for mode in PipelineMode::ALL {
            let (_, r) = run(&corpus(9), mode, 2);
            let excess = r.stages.run_total() - r.end_to_end_seconds;
            assert!((excess - r.overlap_seconds).abs() < 1e-6, "{mode}: {excess} vs {}", r.overlap_seconds);
            assert!(r.stages.entries().iter().all(|(_, s)| *s >= 0.0));
        }
    }

    #[test]
    fn unreadable_input_is_io_error() {
        let (model, gen) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let err = run_pipeline(
            &dir.path().join("missing.txt"),
            &dir.path().join("out.txt"),
            &model,
            &gen,
            &PipelineConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn max_len_must_fit_positions() {
        let (model, mut gen) = tiny();
        gen.max_len = model.config().max_positions + 1;
        let mut out = Vec::new();
        assert!(run_pipeline_on(&corpus(1), &mut out, &model, &gen, &PipelineConfig::default()).is_err());
    }

    #[test]
    fn mode_names() {
        for m in PipelineMode::ALL {
            assert_eq!(m.as_str().parse::<PipelineMode>().unwrap(), m);
        }
        assert!("threads".parse::<PipelineMode>().is_err());
    }
}
