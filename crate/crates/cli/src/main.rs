//! `evolab`: bounds, evolution tables, regularity checks and the Robin
//! pipeline from a JSON config.
//!
//! Exit codes: 0 when every checked flag passes, 2 when a mathematical gate
//! refuses the problem or a check fails, 1 on operational errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evolab::Error;

use commands::{all_pass, Ctx, Flags};
use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "evolab", version, about = "Evolution families of non-autonomous forms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for probe vectors; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Form bounds and the Dini gate: bounds.json.
    Bounds,
    /// Certified shift and evolution tables: table.json, pairs.csv, evolve.json.
    Evolve,
    /// Continuity scans, Schatten profiles and suites on an evolved problem:
    /// regularity.json, suites.csv, plotdata/.
    Verify,
    /// The full Robin pipeline: pipeline.json plus everything above.
    Robin,
    /// Collects stage flags into summary.json.
    Report,
}

fn is_refusal(e: &Error) -> bool {
    matches!(
        e.root(),
        Error::DiniViolated { .. } | Error::ShiftDivergence { .. } | Error::NoCertifiedShift { .. }
    )
}

fn run(cli: &Cli) -> Result<Flags, Error> {
    if let Some(k) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| Error::Invalid(format!("cannot start {k} threads: {e}")))?;
    }
    let cfg = match &cli.config {
        Some(path) => Some(ExperimentConfig::load(path)?),
        None => None,
    };
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.as_ref().and_then(|c| c.out.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    if let Command::Report = cli.command {
        let required = cfg.map(|c| c.stages).unwrap_or_default();
        return commands::report(&out, &required);
    }
    let mut cfg = cfg.ok_or_else(|| Error::Invalid("this command needs --config <path>".into()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let ctx = Ctx { cfg, out };
    match cli.command {
        Command::Bounds => commands::bounds(&ctx),
        Command::Evolve => commands::evolve(&ctx),
        Command::Verify => commands::verify(&ctx),
        Command::Robin => commands::robin(&ctx),
        Command::Report => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(flags) => {
            let failed: Vec<&str> = flags
                .iter()
                .filter(|(_, v)| **v == Some(false))
                .map(|(k, _)| k.as_str())
                .collect();
            if all_pass(&flags) {
                ExitCode::SUCCESS
            } else {
                eprintln!("failed checks: {}", failed.join(", "));
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            if is_refusal(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
