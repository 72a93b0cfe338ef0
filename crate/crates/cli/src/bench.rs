use std::fs;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use fastgen::accounting::{cache_bytes, max_batch_under_budget};
use fastgen::attention::CacheMode;
use fastgen::decode::NgramKernel;
use fastgen::model::Model;
use fastgen::pipeline::{run_pipeline_on, PipelineMode, PipelineReport, StageBreakdown};
use serde_json::{json, Value};

use crate::args::BenchArgs;
use crate::report::{memory_input, print_breakdown, stages_json, write_json};

#[derive(Clone, Copy, Debug, PartialEq)]
struct Cell {
    cache_mode: CacheMode,
    ngram_kernel: NgramKernel,
    pipeline: PipelineMode,
    batch_size: usize,
}

impl Cell {
    fn label(&self) -> String {
        format!(
            "{}/{}/{}/b{}",
            self.cache_mode, self.ngram_kernel, self.pipeline, self.batch_size
        )
    }
}

struct CellResult {
    cell: Cell,
    samples_per_second: f64,
    stages: StageBreakdown,
    overlap_seconds: f64,
    last: PipelineReport,
}

pub fn run(args: &BenchArgs) -> Result<()> {
    let common = &args.common;
    let text = fs::read_to_string(&common.input)
        .with_context(|| format!("reading {}", common.input.display()))?;
    let lines: Vec<String> = text.lines().map(str::to_owned).collect();

    let clock = Instant::now();
    let model = Model::new(common.seed, common.model_config())?;
    let model_load = clock.elapsed().as_secs_f64();

    let reference = Cell {
        cache_mode: CacheMode::None,
        ngram_kernel: NgramKernel::Reference,
        pipeline: PipelineMode::Sync,
        batch_size: common.batch_size,
    };
    let mut cells = Vec::new();
    for cache_mode in CacheMode::ALL {
        for ngram_kernel in NgramKernel::ALL {
            for pipeline in PipelineMode::ALL {
                cells.push(Cell {
                    cache_mode,
                    ngram_kernel,
                    pipeline,
                    batch_size: common.batch_size,
                });
            }
        }
    }

    // Larger batch: as many samples as the dedup cache fits in the budget
    // the baseline cache needs at the configured batch size.
    let (expected, probe) = run_cell(&model, args, &lines, reference)?;
    let template = memory_input(model.config(), 1, common.beam, &probe);
    let budget = cache_bytes(&template.with_batch(common.batch_size));
    let larger = max_batch_under_budget(budget, &template.with_mode(CacheMode::Dedup))
        .clamp(common.batch_size, common.batch_size.max(lines.len()).max(1));
    let larger_cell = Cell {
        cache_mode: CacheMode::Dedup,
        ngram_kernel: NgramKernel::Parallel,
        pipeline: PipelineMode::Async,
        batch_size: larger,
    };
    cells.push(larger_cell);

    if let Some(path) = &args.output {
        fs::write(path, &expected).with_context(|| format!("writing {}", path.display()))?;
    }

    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut stages = StageBreakdown::default();
        let mut sps = 0.0;
        let mut overlap = 0.0;
        let mut last = None;
        for _ in 0..args.repetitions {
            let (out, report) = run_cell(&model, args, &lines, cell)?;
            if out != expected {
                bail!(
                    "outputs of cell {} differ from the reference cell {}; no timings reported",
                    cell.label(),
                    reference.label()
                );
            }
            stages.accumulate(&report.stages);
            sps += report.samples_per_second;
            overlap += report.overlap_seconds;
            last = Some(report);
        }
        let n = args.repetitions as f64;
        let mut stages = stages.scaled(1.0 / n);
        stages.model_load = model_load;
        results.push(CellResult {
            cell,
            samples_per_second: sps / n,
            stages,
            overlap_seconds: overlap / n,
            last: last.expect("at least one repetition"),
        });
    }

    println!("{:<40} {:>12} {:>10}", "cell", "samples/s", "overlap s");
    for r in &results {
        println!("{:<40} {:>12.2} {:>10.4}", r.cell.label(), r.samples_per_second, r.overlap_seconds);
    }

    let find = |c: Cell| results.iter().find(|r| r.cell == c).expect("cell was run");
    let base = Cell { cache_mode: CacheMode::Baseline, ..reference };
    let rows = [
        ("no cache", reference),
        ("baseline", base),
        ("+async", Cell { pipeline: PipelineMode::Async, ..base }),
        ("+parallel-ngram", Cell { pipeline: PipelineMode::Async, ngram_kernel: NgramKernel::Parallel, ..base }),
        ("+dedup", Cell { batch_size: common.batch_size, ..larger_cell }),
        ("+larger batch", larger_cell),
    ];
    let no_cache_sps = find(reference).samples_per_second;
    println!();
    println!("{:<18} {:>6} {:>12} {:>9} {:>12}", "ablation", "batch", "samples/s", "speedup", "cache MB");
    let mut ablation = Vec::new();
    for (name, cell) in rows {
        let r = find(cell);
        let mem = memory_input(model.config(), cell.batch_size, common.beam, &r.last).with_mode(cell.cache_mode);
        let bytes = cache_bytes(&mem);
        let speedup = if no_cache_sps > 0.0 { r.samples_per_second / no_cache_sps } else { 0.0 };
        println!(
            "{name:<18} {:>6} {:>12.2} {:>8.2}x {:>12.3}",
            cell.batch_size,
            r.samples_per_second,
            speedup,
            bytes as f64 / 1e6
        );
        ablation.push(json!({
            "row": name,
            "cell": cell.label(),
            "batch_size": cell.batch_size,
            "samples_per_second": r.samples_per_second,
            "speedup": speedup,
            "cache_bytes": bytes as u64,
        }));
    }

    let configured = Cell {
        cache_mode: common.cache_mode,
        ngram_kernel: common.ngram_kernel,
        pipeline: common.pipeline,
        batch_size: common.batch_size,
    };
    let focus = find(configured);
    println!();
    println!("stage breakdown for {}:", configured.label());
    print_breakdown(&focus.stages);

    if let Some(path) = &common.report {
        let cells: Vec<Value> = results
            .iter()
            .map(|r| {
                json!({
                    "cell": r.cell.label(),
                    "samples_per_second": r.samples_per_second,
                    "overlap_seconds": r.overlap_seconds,
                    "stages": stages_json(&r.stages),
                })
            })
            .collect();
        let mut config = common.to_json();
        config["repetitions"] = json!(args.repetitions);
        write_json(
            path,
            &json!({ "config": config, "cells": cells, "ablation": ablation }),
        )?;
    }
    Ok(())
}

fn run_cell(model: &Model, args: &BenchArgs, lines: &[String], cell: Cell) -> Result<(Vec<u8>, PipelineReport)> {
    let mut generation = args.common.generation();
    generation.cache_mode = cell.cache_mode;
    generation.ngram_kernel = cell.ngram_kernel;
    let mut pipeline = args.common.pipeline_config();
    pipeline.mode = cell.pipeline;
    pipeline.batch_size = cell.batch_size;
    let mut out = Vec::new();
    let report = run_pipeline_on(lines, &mut out, model, &generation, &pipeline)?;
    Ok((out, report))
}
