// SPDX-License-Identifier: MIT OR Apache-2.0

//! `ensemble-cpd`: generate data, score it with an ensemble, calibrate,
//! aggregate and evaluate, one artifact directory per run.

mod commands;
mod config;
mod layout;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ensemble_cpd::{AggregationFamily, CpdError, Result};

use config::Overrides;
use layout::{Layout, Split};

#[derive(Parser, Debug)]
#[command(
    name = "ensemble-cpd",
    version,
    about = "Ensemble change-point detection experiments"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Generate,
    /// Train the ensemble and write score matrices, or import external ones.
    Score {
        /// Directory of `<sequence_id>.csv` score matrices to import.
        #[arg(long, requires = "external_labels")]
        external_scores: Option<PathBuf>,
        /// Labels file for the imported matrices.
        #[arg(long, requires = "external_scores")]
        external_labels: Option<PathBuf>,
        /// Split the imported matrices belong to.
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Fit per-model calibrators on the hold-out scores.
    Calibrate,
    /// Write statistic traces and detections for every aggregation.
    Aggregate,
    /// Threshold sweeps, window selection, rank table and plot data.
    Evaluate,
    /// Per-threshold results for one aggregation.
    Sweep {
        /// mean, min, max, median or wwaggr.
        #[arg(long)]
        aggregation: AggregationFamily,
        /// Window size; defaults to the one `evaluate` selected.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Rank aggregation families across several evaluation reports.
    Rank {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn exit_code(e: &CpdError) -> u8 {
    match e {
        CpdError::Config(_) => 2,
        CpdError::Shape(_) | CpdError::Domain(_) | CpdError::Parse { .. } | CpdError::Io { .. } => 3,
        CpdError::Fit(_) => 4,
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.overrides.resolve()?;
    let layout = Layout::new(cli.overrides.output_root(&cfg));
    match cli.command {
        Command::Generate => commands::generate(&cfg, &layout),
        Command::Score {
            external_scores: Some(dir),
            external_labels: Some(labels),
            split,
        } => commands::import_scores(&layout, &dir, &labels, split),
        Command::Score { .. } => commands::score(&cfg, &layout),
        Command::Calibrate => commands::calibrate(&cfg, &layout),
        Command::Aggregate => commands::aggregate(&cfg, &layout),
        Command::Evaluate => commands::evaluate(&cfg, &layout),
        Command::Sweep { aggregation, window } => commands::sweep(&cfg, &layout, aggregation, window),
        Command::Rank { reports } => commands::rank(&cfg, &layout, &reports),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
