//! Command-line workflows: `train`, `eval`, `sweep`, `report`.
//!
//! Exit status 0 on success, 2 for configuration or input errors, 3 when
//! training aborts on a non-finite update.

pub mod commands;
pub mod config;
pub mod metrics;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Result;
use crate::evalharness::render_table;

pub use commands::{run_eval, run_report, run_sweep, run_train, EvalArgs};
pub use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "perturbnet", version, about = "Noise-robust training of small networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every weight seed of a config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Noisy-inference evaluation of a checkpoint file or run directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated test-time strengths.
        #[arg(long, value_delimiter = ',')]
        sigma_test: Option<Vec<f64>>,
        #[arg(long)]
        draws: Option<usize>,
        /// Defaults to the run's config snapshot.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train/eval grid over strengths and warm-ups.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// CSV series and bound tables for a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Print the desk-scale default config.
    DefaultConfig,
}

fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train { config } => {
            let s = commands::cmd_train(&config)?;
            let last: Vec<String> = s
                .logs
                .iter()
                .enumerate()
                .filter_map(|(i, l)| l.last().map(|r| format!("seed {i}: epoch {} val_acc {:.4}", r.epoch, r.val_acc_clean)))
                .collect();
            Ok(format!(
                "{}\nwrote {} (config {})",
                last.join("\n"),
                s.run_dir.display(),
                &s.config_hash[..12]
            ))
        }
        Command::Eval {
            checkpoint,
            sigma_test,
            draws,
            config,
        } => {
            let (out, path) = run_eval(&EvalArgs {
                checkpoint,
                sigma_test,
                draws,
                config,
            })?;
            Ok(format!("{}wrote {}", render_table(&out.reports), path.display()))
        }
        Command::Sweep { config, resume } => {
            let s = commands::cmd_sweep(&config, resume)?;
            Ok(format!(
                "{}{} cells computed, {} resumed",
                commands::render_sweep_table(&s),
                s.computed,
                s.cells.len() - s.computed
            ))
        }
        Command::Report { run } => {
            let r = run_report(&run)?;
            Ok(format!("wrote {} files under {}", r.files.len(), run.join("report").display()))
        }
        Command::DefaultConfig => ExperimentConfig::desk_default().to_toml(),
    }
}

/// Runs one command, printing its output, and returns the exit status.
pub fn run(cli: Cli) -> i32 {
    match execute(cli) {
        Ok(text) => {
            println!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            e.exit_code()
        }
    }
}
