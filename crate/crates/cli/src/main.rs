//! `mftd`: runs mean-field TD experiments from JSON configs.
//!
//! Exit codes: 0 on success, 2 on a config error, 3 when a run blew up,
//! 1 for anything else. `MFTD_WORKERS` sets the worker thread count.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mftd_core::experiment::{execute, ExperimentConfig, ExperimentKind};
use mftd_core::Error;

#[derive(Parser)]
#[command(name = "mftd", version, about = "Mean-field TD learning experiments on finite MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One run of the configured dynamics.
    Run(Common),
    /// TD/ETD/CTTD/IP coupling distances and their scaling fits.
    Coupling(Common),
    /// Runs over `alpha_grid`.
    AlphaSweep(Common),
    /// Runs over `m_grid`.
    MSweep(Common),
    /// Runs over `epsilon_grid`.
    EpsilonSweep(Common),
    /// Empirical κ estimate.
    Kappa(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the diagnostics stride.
    #[arg(long)]
    stride: Option<usize>,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BLOWUP: u8 = 3;

fn init_workers() -> Result<(), String> {
    let Ok(value) = std::env::var("MFTD_WORKERS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("MFTD_WORKERS = {value:?} is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = init_workers() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let (kind, args) = match cli.command {
        Command::Run(a) => (ExperimentKind::Run, a),
        Command::Coupling(a) => (ExperimentKind::Coupling, a),
        Command::AlphaSweep(a) => (ExperimentKind::AlphaSweep, a),
        Command::MSweep(a) => (ExperimentKind::MSweep, a),
        Command::EpsilonSweep(a) => (ExperimentKind::EpsilonSweep, a),
        Command::Kappa(a) => (ExperimentKind::KappaReport, a),
    };
    let mut cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(stride) = args.stride {
        cfg.stride = stride;
    }
    let out = match (args.out, &cfg.output_dir) {
        (Some(o), _) => o,
        (None, Some(o)) => cfg.base_dir().join(o),
        (None, None) => {
            eprintln!("error: no output directory (pass --out or set output_dir)");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match execute(kind, &cfg, &out) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            if outcome.blown_up {
                eprintln!("error: run blew up; see the status output");
                ExitCode::from(EXIT_BLOWUP)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => EXIT_CONFIG,
                Error::BlowUp { .. } => EXIT_BLOWUP,
                _ => EXIT_FAILURE,
            })
        }
    }
}
