//! Command-line front end for training group-sparse leaky-ReLU networks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CmdError;

#[derive(Parser)]
#[command(
    name = "alsparse",
    about = "Train leaky-ReLU networks with group sparsity via an inexact augmented Lagrangian method, plus SGD-family baselines",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset to CSV files.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        outdir: Option<PathBuf>,
    },
    /// Train the configured solver for one seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        outdir: Option<PathBuf>,
        /// Directory holding the MNIST IDX files (overrides the config and
        /// the IALAM_MNIST_DIR environment variable).
        #[arg(long)]
        mnist_dir: Option<PathBuf>,
        /// Use the escalation exponent required by the convergence theory.
        #[arg(long)]
        theory_mode: bool,
        /// Worker threads for the parallel kernels (0 = all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Evaluate stored parameters on the configured dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        mnist_dir: Option<PathBuf>,
    },
    /// Run every seed and aggregate metrics across them.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seed list overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        outdir: Option<PathBuf>,
        #[arg(long)]
        mnist_dir: Option<PathBuf>,
        #[arg(long)]
        theory_mode: bool,
    },
    /// Build performance profiles from per-solver result CSVs.
    Profile {
        /// Directory of <solver>.csv files with header problem,TrainErr,TestErr.
        #[arg(long)]
        dir: PathBuf,
        /// TrainErr or TestErr.
        #[arg(long)]
        measure: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn build_pool(jobs: Option<usize>) -> Result<(), CmdError> {
    if let Some(j) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CmdError::Runtime(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<i32, CmdError> {
    match cli.cmd {
        Cmd::GenData {
            config,
            seed,
            outdir,
        } => {
            let cfg = config::load_config(&config)?.resolve(false)?;
            commands::cmd_gen_data(&cfg, seed, outdir.as_deref())
        }
        Cmd::Train {
            config,
            seed,
            outdir,
            mnist_dir,
            theory_mode,
            jobs,
        } => {
            build_pool(jobs)?;
            let cfg = config::load_config(&config)?.resolve(theory_mode)?;
            commands::cmd_train(&cfg, seed, outdir.as_deref(), mnist_dir.as_deref())
        }
        Cmd::Eval {
            config,
            params,
            mnist_dir,
        } => {
            let cfg = config::load_config(&config)?.resolve(false)?;
            commands::cmd_eval(&cfg, &params, mnist_dir.as_deref())
        }
        Cmd::Sweep {
            config,
            seeds,
            jobs,
            outdir,
            mnist_dir,
            theory_mode,
        } => {
            let cfg = config::load_config(&config)?.resolve(theory_mode)?;
            commands::cmd_sweep(&cfg, seeds, jobs, outdir.as_deref(), mnist_dir.as_deref())
        }
        Cmd::Profile { dir, measure, out } => {
            commands::cmd_profile(&dir, &measure, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
