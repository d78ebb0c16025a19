//! `trotter` — scenario simulation, state estimation, and evaluation for a
//! quadruped odometry stack. See `trotter --help` for the subcommands.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use trotter_cli::trotter::eval::Alignment;
use trotter_cli::trotter::runner::EstimatorKind;
use trotter_cli::{
    cmd_estimate, cmd_evaluate, cmd_simulate, cmd_sweep, error_kind, EstimateOptions, EST_FILE,
};

#[derive(Parser)]
#[command(
    name = "trotter",
    version,
    about = "Quadruped leg-odometry workbench: simulate gait scenarios, run estimator variants, score them"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario log (truth, IMU, and leg-encoder CSVs).
    Simulate {
        /// Scenario config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output log directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one estimator over a recorded log.
    Estimate {
        /// Log directory produced by `simulate`.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for est/diag/modes CSVs and runtime.json.
        #[arg(long)]
        out: PathBuf,
        /// One of: eskf-pc, eskf-r, eskf-l, imm-no-interaction, imm-po, imm-t.
        #[arg(long)]
        estimator: String,
        /// Override the mode count (requires --alpha with as many values).
        #[arg(long)]
        modes: Option<usize>,
        /// Override the per-mode noise scales, comma-separated, weakest first.
        #[arg(long, value_delimiter = ',')]
        alpha: Option<Vec<f64>>,
        /// Override the Markov transition matrix, row-major comma-separated.
        #[arg(long, value_delimiter = ',')]
        transition: Option<Vec<f64>>,
    },
    /// Score an estimated trajectory against ground truth.
    Evaluate {
        /// Estimated trajectory CSV (from `estimate`).
        est: PathBuf,
        /// Ground-truth CSV (from `simulate`).
        truth: PathBuf,
        /// ATE alignment: rigid or none.
        #[arg(long, default_value = "rigid")]
        align: String,
        /// RPE segment distance in meters.
        #[arg(long = "rpe-distance", default_value_t = 1.0)]
        rpe_distance: f64,
        /// Directory for metrics.json / metrics.txt (prints to stdout regardless).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario × estimator grid into one comparison table.
    Sweep {
        /// Sweep manifest (JSON): scenario list, estimator roster, seed.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for sweep.csv, runtime.json, errors.json, and per-cell artifacts.
        #[arg(long)]
        out: PathBuf,
        /// Override the manifest seed for every scenario.
        #[arg(long)]
        seed: Option<u64>,
        /// Restrict the roster (repeatable).
        #[arg(long = "estimator")]
        estimators: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let summary = cmd_simulate(&config, &out, seed)?;
            println!(
                "wrote {} truth rows, {} imu rows, {} leg rows to {}",
                summary.truth_rows,
                summary.imu_rows,
                summary.leg_rows,
                summary.out_dir.display()
            );
        }
        Command::Estimate { config, out, estimator, modes, alpha, transition } => {
            let kind: EstimatorKind = estimator.parse()?;
            let options = EstimateOptions { modes, alphas: alpha, transition };
            let output = cmd_estimate(&config, kind, &options, &out)?;
            println!(
                "wrote {} estimate rows to {} ({:.3} us/step over {} timed steps)",
                output.est.len(),
                out.join(EST_FILE).display(),
                output.runtime.mean_step_seconds * 1e6,
                output.runtime.timed_steps
            );
        }
        Command::Evaluate { est, truth, align, rpe_distance, out } => {
            let align: Alignment = align.parse()?;
            let (_, table) = cmd_evaluate(&est, &truth, align, rpe_distance, out.as_deref())?;
            print!("{table}");
        }
        Command::Sweep { config, out, seed, estimators } => {
            let summary = cmd_sweep(&config, &out, seed, &estimators)?;
            println!(
                "wrote {} ({} cells, {} failed); timing in {}",
                summary.table_path.display(),
                summary.cells,
                summary.failures,
                summary.runtime_path.display()
            );
            if summary.failures > 0 {
                println!("failed cells listed in {}", out.join("errors.json").display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = err
                .downcast_ref::<trotter_cli::trotter::Error>()
                .map(error_kind)
                .unwrap_or("other");
            let payload = serde_json::json!({
                "error": { "kind": kind, "message": format!("{err:#}") }
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
