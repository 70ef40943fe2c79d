//! `autoscale` command-line driver.

mod commands;
mod config;
mod error;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use autoscale_core::engine::Method;
use clap::{Parser, Subcommand};

use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "autoscale", version, about = "Closed-loop real/synthetic data-mixture engine")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    budget: Option<usize>,
    #[arg(long, global = true)]
    rounds: Option<usize>,
    #[arg(long, global = true)]
    clusters: Option<usize>,
    #[arg(long, global = true)]
    method: Option<Method>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate real, synthetic-pool and calibration datasets from a world spec.
    GenWorld {
        /// World spec; defaults to the configured `world`.
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Train Graph-RAE on the real set and embed all three datasets.
    Embed,
    /// Fit the cluster model and write assignments.
    Cluster,
    /// Plan the next Cluster-GA step from a round log.
    Optimize {
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write the selection a method would make next.
    Select {
        method: Method,
        /// Round log; required for autoscale.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Full closed loop against the harness oracle.
    Run {
        /// Continue an existing round log instead of starting over.
        #[arg(long)]
        resume: bool,
    },
    /// Score a dataset's stored subscores with PDMS and EPDMS.
    Score {
        /// Dataset JSONL; defaults to the calibration set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Tabulate a round log.
    Report {
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        budget: cli.budget,
        rounds: cli.rounds,
        clusters: cli.clusters,
        method: cli.method,
        out: cli.out,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::GenWorld { world } => commands::gen_world(&cfg, world.as_deref()),
        Command::Embed => commands::embed(&cfg),
        Command::Cluster => commands::cluster(&cfg),
        Command::Optimize { log } => commands::optimize(&cfg, log.as_deref()),
        Command::Select { method, log } => commands::select(&cfg, method, log.as_deref()),
        Command::Run { resume } => commands::run(&cfg, resume),
        Command::Score { data } => commands::score(&cfg, data.as_deref()),
        Command::Report { log } => commands::report(&cfg, log.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AUTOSCALE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
