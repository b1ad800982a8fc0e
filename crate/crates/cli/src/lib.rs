//! Command-line front end: configuration, experiment runs, comparisons,
//! plots, data export and gradient checks.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod plot;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{ExperimentConfig, SCHEMA_VERSION};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "sidetune", version, about = "Side-tuning continual-learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every configured strategy through the sequence for one seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Rank the configured strategies over one or more seeds.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// First seed; later seeds count up from it.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Render SVG charts from results tables.
    Plot {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the configured sequence to IDX files.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Executes a parsed command, logging progress to `log`.
pub fn dispatch(cli: Cli, log: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            jobs,
        } => commands::cmd_run(&config, seed, out.as_deref(), jobs, log).map(drop),
        Command::Compare {
            config,
            seed,
            seeds,
            out,
            jobs,
        } => commands::cmd_compare(&config, seed, seeds, out.as_deref(), jobs, log).map(drop),
        Command::Plot { inputs, out } => commands::cmd_plot(&inputs, &out, log),
        Command::GenData { config, seed, out } => commands::cmd_gen_data(&config, seed, out.as_deref(), log).map(drop),
        Command::GradCheck { seed, seeds, out } => commands::cmd_grad_check(seed, seeds, out.as_deref(), log),
    }
}
