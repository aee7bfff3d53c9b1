//! `tensorslice`: train a toy baseline, profile layer sensitivity, compress
//! with MPO/Tucker plans, heal slices by feature distillation, fine-tune,
//! evaluate, and aggregate run reports.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error
//! (missing or corrupt files, shape problems), 4 training divergence.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tensorslice_core::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "tensorslice", version, about = "Slice-wise feature-distillation compression")]
struct Cli {
    /// Configuration document (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the config worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory (default: runs/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy baseline on the configured synthetic dataset.
    TrainBaseline,
    /// Rank layers by single-layer tensorization sensitivity.
    Profile {
        #[arg(long)]
        model: PathBuf,
    },
    /// Decompose layers per plan without healing.
    Compress {
        #[arg(long)]
        model: PathBuf,
        /// Overrides compress.target_cr.
        #[arg(long)]
        cr: Option<f64>,
    },
    /// Capture features and heal every slice independently.
    Distill {
        #[arg(long)]
        model: PathBuf,
        /// Plan document; computed from the config when absent.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Global end-to-end fine-tuning (non-tensorized layers frozen).
    Finetune {
        #[arg(long)]
        model: PathBuf,
    },
    /// Local healing followed by global fine-tuning.
    Hybrid {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Accuracy and loss of a saved model on the configured test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Aggregate run manifests into a summary table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_)
        | Error::InvalidRate(_)
        | Error::Infeasible(_)
        | Error::TomlDe(_)
        | Error::TomlSer(_) => 2,
        Error::Divergence(_) => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> tensorslice_core::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if let Command::Compress { cr: Some(cr), .. } = &cli.command {
        cfg.compress.target_cr = *cr;
    }
    cfg.validate()?;

    let default_out = |name: &str| PathBuf::from("runs").join(name);
    let out = |name: &str| cli.out.clone().unwrap_or_else(|| default_out(name));

    match &cli.command {
        Command::TrainBaseline => commands::cmd_train_baseline(&cfg, &out("train-baseline")),
        Command::Profile { model } => commands::cmd_profile(&cfg, model, &out("profile")),
        Command::Compress { model, .. } => commands::cmd_compress(&cfg, model, &out("compress")),
        Command::Distill { model, plan } => {
            commands::cmd_distill(&cfg, model, plan.as_deref(), &out("distill"))
        }
        Command::Finetune { model } => commands::cmd_finetune(&cfg, model, &out("finetune")),
        Command::Hybrid { model, plan } => {
            commands::cmd_hybrid(&cfg, model, plan.as_deref(), &out("hybrid"))
        }
        Command::Eval { model } => commands::cmd_eval(&cfg, model, cli.out.as_deref()),
        Command::Report { runs } => commands::cmd_report(runs, &out("report")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
