use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use fastgen::attention::CacheMode;
use fastgen::decode::{GenerationConfig, NgramKernel};
use fastgen::model::{ArchKind, ModelConfig};
use fastgen::pipeline::{PipelineConfig, PipelineMode};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "fastgen", version, about = "Beam-search generation with cache, n-gram and pipeline options")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate one hypothesis per input line.
    Generate(GenerateArgs),
    /// Time every cache / kernel / pipeline combination and print an ablation table.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Where hypotheses are written.
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Optional copy of the reference cell's hypotheses.
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    /// Timed runs per cell.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    pub repetitions: u32,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Source text, one sample per line.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// JSON report destination.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,

    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3)]
    pub no_repeat_ngram_size: usize,
    #[arg(long, default_value_t = 0)]
    pub min_len: usize,
    #[arg(long, default_value_t = 20)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lenpen: f32,

    /// none | baseline | dedup
    #[arg(long, default_value = "dedup")]
    pub cache_mode: CacheMode,
    /// reference | parallel
    #[arg(long, default_value = "parallel")]
    pub ngram_kernel: NgramKernel,
    /// sync | async
    #[arg(long, default_value = "async")]
    pub pipeline: PipelineMode,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    pub post_workers: u64,
    #[arg(long, default_value_t = 0)]
    pub inject_post_delay_ms: u64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// encdec | prefixlm
    #[arg(long, default_value = "encdec")]
    pub arch: ArchKind,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab_size: usize,
}

impl CommonArgs {
    pub fn model_config(&self) -> ModelConfig {
        match self.arch {
            ArchKind::EncoderDecoder => ModelConfig::encoder_decoder(self.layers, self.dim, self.vocab_size),
            ArchKind::PrefixLm => ModelConfig::prefix_lm(self.layers, self.dim, self.vocab_size),
        }
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            beam_size: self.beam,
            no_repeat_ngram_size: self.no_repeat_ngram_size,
            min_len: self.min_len,
            max_len: self.max_len,
            length_penalty: self.lenpen,
            cache_mode: self.cache_mode,
            ngram_kernel: self.ngram_kernel,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            mode: self.pipeline,
            batch_size: self.batch_size,
            post_process_workers: self.post_workers as usize,
            injected_post_delay: Duration::from_millis(self.inject_post_delay_ms),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "input": self.input,
            "beam": self.beam,
            "batch_size": self.batch_size,
            "no_repeat_ngram_size": self.no_repeat_ngram_size,
            "min_len": self.min_len,
            "max_len": self.max_len,
            "lenpen": self.lenpen,
            "cache_mode": self.cache_mode,
            "ngram_kernel": self.ngram_kernel,
            "pipeline": self.pipeline,
            "post_workers": self.post_workers,
            "inject_post_delay_ms": self.inject_post_delay_ms,
            "seed": self.seed,
            "model": self.model_config(),
        })
    }
}
