// Copyright 2026 Cogflow Contributors
// SPDX-License-Identifier: Apache-2.0

//! `cogflow`: runs experiments described by a JSON configuration.
//!
//! Exit codes: 0 ok, 1 verification failure, 2 configuration error,
//! 3 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cogflow_core::harness::{
    apply_overrides, exit_code, resolve_workers, run_config, Command, ExperimentConfig,
    HarnessError, RunManifest, RunOptions,
};
use cogflow_core::validate_model;

#[derive(Parser, Debug)]
#[command(name = "cogflow", version, about = "Simulate and verify cognitive-flow models")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Simulate the ensemble and dump particles.
    Simulate(RunArgs),
    /// Simulate, estimate densities and run the configured checks.
    Verify(RunArgs),
    /// Integrate the thread-switching dynamics.
    Breadth(RunArgs),
    /// Simulate and write plot-ready grids.
    Export(RunArgs),
    /// Parse and validate a configuration without running it.
    Validate {
        #[arg(short, long)]
        config: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(short, long)]
    config: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; falls back to COGFLOW_WORKERS, then the core count.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory override.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn run(cmd: Command, args: RunArgs) -> Result<RunManifest, HarnessError> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    apply_overrides(
        &mut cfg,
        &RunOptions {
            seed: args.seed,
            workers: args.workers,
            out_dir: args.output,
        },
    );
    let workers = resolve_workers(args.workers)?;
    run_config(&cfg, cmd, workers)
}

fn validate(path: PathBuf) -> i32 {
    match ExperimentConfig::from_path(&path) {
        Ok(cfg) => {
            let report = validate_model(&cfg.model);
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("reports serialize")
            );
            println!("config digest {}", cfg.digest());
            0
        }
        Err(e) => {
            eprintln!("cogflow: {e}");
            exit_code(&Err(e))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args) = match cli.command {
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::Verify(a) => (Command::Verify, a),
        Cmd::Breadth(a) => (Command::Breadth, a),
        Cmd::Export(a) => (Command::Export, a),
        Cmd::Validate { config } => return ExitCode::from(validate(config) as u8),
    };
    let outcome = run(cmd, args);
    match &outcome {
        Ok(m) => {
            for c in &m.checks {
                println!("{:<24} {}", c.name, if c.pass { "pass" } else { "FAIL" });
            }
            for f in &m.files {
                println!("wrote {} ({} bytes)", f.name, f.bytes);
            }
            println!("status {:?} in {:.2} s", m.status, m.wall_clock_seconds);
        }
        Err(e) => eprintln!("cogflow: {e}"),
    }
    ExitCode::from(exit_code(&outcome) as u8)
}
