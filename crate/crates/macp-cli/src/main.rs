//! Experiment driver binding the library into the full protocol: dataset
//! generation, single-agent pretraining, cooperative fine-tuning, pipeline
//! evaluation, the four sweeps, and the spatial-shift diagnostic.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric
//! divergence, 5 missing artifact.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Diverged(String),
    MissingArtifact(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::MissingArtifact(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Diverged(m) | CliError::MissingArtifact(m) => m,
        }
    }
}

#[derive(Parser)]
#[command(name = "macp", about = "Cooperative BEV perception experiments", version)]
struct Cli {
    /// Seed override available to every subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path override available to every subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON config file (gen-data and sweep).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the pretrain/finetune/test dataset splits.
    GenData {},
    /// Train the single-agent model on a single-agent split.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        epochs: usize,
        #[arg(long, default_value_t = 6e-3)]
        lr: f64,
    },
    /// Adapt a pretrained checkpoint to cooperative data.
    Finetune {
        /// One of: full, head, adapter, ssf, conada, macp.
        #[arg(long)]
        variant: String,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        factor: u32,
        #[arg(long, default_value = "weighted_sum")]
        fusion: String,
        #[arg(long, default_value_t = 4)]
        epochs: usize,
        #[arg(long, default_value_t = 5e-3)]
        lr: f64,
        /// Split evaluated for the written report (defaults to the
        /// fine-tuning split).
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under a pipeline mode.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// no_fusion | late_fusion | early_fusion | cooperative (alias macp).
        #[arg(long, default_value = "cooperative")]
        mode: String,
        #[arg(long, default_value = "weighted_sum")]
        fusion: String,
        #[arg(long)]
        max_agents: Option<usize>,
    },
    /// Run one of the experiment sweeps.
    Sweep {
        /// compression | cavs | fusion | robustness.
        #[arg(long)]
        kind: String,
    },
    /// Emit the signed-range histogram CSV for a cooperative split.
    DiagShift {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 40)]
        bins: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {} => commands::gen_data(cli.config.as_deref(), cli.out.as_deref(), cli.seed),
        Command::Pretrain { data, epochs, lr } =>require_out(cli.out).and_then(|out| {
            commands::pretrain(&data, &out, epochs, lr, cli.seed.unwrap_or(0))
        }),
        Command::Finetune { variant, pretrained, data, factor, fusion, epochs, lr, eval_data } => {
            require_out(cli.out).and_then(|out| {
                commands::finetune(commands::FinetuneArgs {
                    variant,
                    pretrained,
                    data,
                    factor,
                    fusion,
                    epochs,
                    lr,
                    seed: cli.seed.unwrap_or(0),
                    out,
                    eval_data,
                })
            })
        }
        Command::Eval { checkpoint, data, mode, fusion, max_agents } => require_out(cli.out).and_then(|out| {
            commands::eval(&checkpoint, &data, &mode, &fusion, max_agents, &out)
        }),
        Command::Sweep { kind } => {
            let config = cli.config.clone().ok_or_else(|| CliError::Config("sweep requires --config".into()));
            config.and_then(|cfg| require_out(cli.out).and_then(|out| commands::sweep(&kind, &cfg, &out, cli.seed)))
        }
        Command::DiagShift { data, bins } => {
            require_out(cli.out).and_then(|out| commands::diag_shift(&data, bins, &out))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn require_out(out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    out.ok_or_else(|| CliError::Config("missing required --out path".into()))
}
