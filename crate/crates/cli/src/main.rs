//! `tfib`: simulate toric-array channels, estimate waves, sweep and export.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use commands::{GainDomain, SweepMetric, SweepParam};

#[derive(Debug, Parser)]
#[command(
    name = "tfib",
    version,
    about = "Toric-array channel simulation and joint AoA/EoA/ToA estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the scene and write the tensor cache.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the waves from a cache, or from the scene if none is given.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tensor: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Delta metric against one parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated, strictly increasing.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
        #[arg(long, value_enum, default_value = "delta-azimuth")]
        metric: SweepMetric,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Normalized gain cuts for a wave swept across one domain.
    Gain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        domain: GainDomain,
        /// Degrees or nanoseconds; defaults to the standard steps.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("TFIB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("TFIB_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Simulate { config, out } => commands::simulate(&config::load_config(&config)?, out.as_deref()),
        Command::Estimate { config, tensor, out } => {
            commands::estimate(&config::load_config(&config)?, tensor.as_deref(), out.as_deref())
        }
        Command::Sweep {
            config,
            param,
            values,
            metric,
            out,
        } => commands::sweep(&config::load_config(&config)?, param, &values, metric, out.as_deref()),
        Command::Gain {
            config,
            domain,
            values,
            out,
        } => commands::gain(
            &config::load_config(&config)?,
            domain,
            values.as_deref(),
            out.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
