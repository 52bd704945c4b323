//! `stacklq run <config.json>`: solves, simulates and verifies one game
//! configuration and writes the results as CSV and JSON files.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "stacklq",
    version,
    about = "Stackelberg LQ games with overlapping information"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration.
    Run {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Worker threads for the path simulations.
        #[arg(long, env = "STACKLQ_THREADS")]
        threads: Option<usize>,
        /// Replaces `sim.seed` from the configuration.
        #[arg(long)]
        seed_override: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Command::Run {
        config,
        output_dir,
        threads,
        seed_override,
    } = cli.command;
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let text = match std::fs::read_to_string(&config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", config.display());
            return ExitCode::from(2);
        }
    };
    let mut cfg = match RunConfig::parse(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = seed_override {
        cfg.sim.seed = seed;
    }
    let dir = output_dir
        .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("output"));
    match run::run(&cfg, &dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
