mod args;
mod bench;
mod report;

use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Parser;
use fastgen::model::Model;
use fastgen::pipeline::run_pipeline;

use args::{Cli, Command, GenerateArgs};
use report::{memory_input, print_breakdown, run_json, write_json};

fn generate(args: &GenerateArgs) -> Result<()> {
    let common = &args.common;
    let clock = Instant::now();
    let model = Model::new(common.seed, common.model_config())?;
    let model_load = clock.elapsed().as_secs_f64();

    let mut report = run_pipeline(
        &common.input,
        &args.output,
        &model,
        &common.generation(),
        &common.pipeline_config(),
    )
    .with_context(|| format!("generating from {}", common.input.display()))?;
    report.stages.model_load = model_load;

    println!(
        "{} samples in {:.3}s ({:.2} samples/s, {} pipeline, {} cache)",
        report.samples, report.end_to_end_seconds, report.samples_per_second, common.pipeline, common.cache_mode
    );
    print_breakdown(&report.stages);
    if let Some(path) = &common.report {
        let memory = memory_input(model.config(), common.batch_size, common.beam, &report);
        write_json(path, &run_json(common.to_json(), &report, &memory))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(args) => generate(args),
        Command::Bench(args) => bench::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
