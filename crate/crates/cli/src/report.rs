use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use fastgen::accounting::{CacheComparison, MemoryModelInput};
use fastgen::attention::CacheMode;
use fastgen::model::ModelConfig;
use fastgen::pipeline::{PipelineReport, StageBreakdown};
use serde_json::{json, Value};

pub const BYTES_PER_ELEMENT: usize = 4;

/// Memory-model input for the shape a run actually decoded.
pub fn memory_input(model: &ModelConfig, batch: usize, beam: usize, report: &PipelineReport) -> MemoryModelInput {
    MemoryModelInput {
        batch,
        beam,
        source_len: report.max_source_width,
        target_len: report.max_steps,
        embed_dim: model.embed_dim,
        decoder_layers: model.num_decoder_layers,
        bytes_per_element: BYTES_PER_ELEMENT,
        kind: model.kind,
        cache_mode: CacheMode::Baseline,
    }
}

pub fn stages_json(stages: &StageBreakdown) -> Value {
    Value::Object(
        stages
            .entries()
            .iter()
            .map(|(name, secs)| (name.to_string(), json!(secs)))
            .collect(),
    )
}

pub fn run_json(config: Value, report: &PipelineReport, memory: &MemoryModelInput) -> Value {
    let cmp = CacheComparison::of(memory);
    let wall = report.end_to_end_seconds + report.stages.model_load;
    json!({
        "config": config,
        "stages": stages_json(&report.stages),
        "samples": report.samples,
        "samples_per_second": report.samples_per_second,
        "end_to_end_seconds": report.end_to_end_seconds,
        "wall_seconds_with_load": wall,
        "cache_bytes_baseline": cmp.baseline as u64,
        "cache_bytes_dedup": cmp.dedup as u64,
        "reduction_factor": cmp.reduction_factor(),
        "overlap_seconds": report.overlap_seconds,
    })
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing report {}", path.display()))
}

/// Stage shares in the style of a stacked time breakdown.
pub fn print_breakdown(stages: &StageBreakdown) {
    let total: f64 = stages.entries().iter().map(|(_, s)| s).sum();
    for (name, secs) in stages.entries() {
        let share = if total > 0.0 { 100.0 * secs / total } else { 0.0 };
        println!("  {name:<20} {secs:>10.4}s {share:>6.1}%");
    }
}
