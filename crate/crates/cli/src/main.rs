//! `hcpo`: train, evaluate, verify and ablate hierarchical conductor-based
//! multi-agent policies.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 aborted run,
//! 3 verification failure.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hcpo_core::envlab::EnvConfig;
use hcpo_core::policy::ExecutionMode;

use commands::verify::Suite;
use commands::Failure;
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "hcpo", version, about = "Hierarchical conductor-based trust-region policy optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file, or a run manifest (`manifest.json`) to replay.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted config override, e.g. `train.iterations=10` (repeatable).
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Base random seed (`train.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to a per-run directory under $HCPO_OUT_DIR (or ./runs).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Rollout worker threads (`train.rollout_parallelism`).
    #[arg(long, global = true)]
    parallelism: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Centralized,
    Decentralized,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one run, writing metrics, checkpoints and a manifest.
    Train,
    /// Greedy evaluation of a checkpoint.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Execution mode; decentralized when the checkpoint has local conductors.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Run an oracle suite; exits with status 3 on any violation.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
        /// Number of random instances (`verify.seed_count`).
        #[arg(long)]
        seed_count: Option<u64>,
        /// Checkpoint directory of a tabular run (monotonicity suite).
        #[arg(long, value_name = "DIR")]
        checkpoints: Option<PathBuf>,
    },
    /// Compare variants and instruction counts over several seeds.
    Ablate {
        /// Comma-separated variants (`ablate.variants`).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Comma-separated instruction counts (`ablate.k_values`).
        #[arg(long = "k", value_delimiter = ',')]
        k_values: Vec<usize>,
        /// Seeds per row (`ablate.seeds`).
        #[arg(long)]
        seeds: Option<u64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Verify { .. } => "verify",
            Command::Ablate { .. } => "ablate",
        }
    }
}

fn env_kind(env: &EnvConfig) -> &'static str {
    match env {
        EnvConfig::Matrix { .. } => "matrix",
        EnvConfig::Spread { .. } => "spread",
        EnvConfig::Tabular { .. } => "tabular",
    }
}

fn output_dir(explicit: Option<&Path>, command: &Command, cfg: &RunConfig) -> PathBuf {
    if let Some(dir) = explicit {
        return dir.to_path_buf();
    }
    let root = std::env::var_os("HCPO_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    let name = match command {
        Command::Verify { suite, .. } => format!("verify-{suite:?}-seed{}", cfg.train.seed).to_lowercase(),
        _ => format!(
            "{}-{}-{}-seed{}",
            command.name(),
            env_kind(&cfg.env),
            cfg.train.variant.name(),
            cfg.train.seed
        ),
    };
    root.join(name)
}

fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut overrides = cli.common.overrides.clone();
    if let Some(seed) = cli.common.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    if let Some(p) = cli.common.parallelism {
        overrides.push(format!("train.rollout_parallelism={p}"));
    }
    match &cli.command {
        Command::Verify { seed_count: Some(n), .. } => overrides.push(format!("verify.seed_count={n}")),
        Command::Ablate { variants, k_values, seeds } => {
            if !variants.is_empty() {
                let quoted: Vec<String> = variants.iter().map(|v| format!("\"{}\"", v.trim())).collect();
                overrides.push(format!("ablate.variants=[{}]", quoted.join(", ")));
            }
            if !k_values.is_empty() {
                let ks: Vec<String> = k_values.iter().map(|k| k.to_string()).collect();
                overrides.push(format!("ablate.k_values=[{}]", ks.join(", ")));
            }
            if let Some(s) = seeds {
                overrides.push(format!("ablate.seeds={s}"));
            }
        }
        _ => {}
    }
    config::load(cli.common.config.as_deref(), &overrides).map_err(Failure::Usage)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve(&cli)?;
    let out = output_dir(cli.common.out.as_deref(), &cli.command, &cfg);
    match &cli.command {
        Command::Train => commands::train::run(&cfg, &out),
        Command::Evaluate { checkpoint, episodes, mode } => {
            let mode = mode.map(|m| match m {
                Mode::Centralized => ExecutionMode::Centralized,
                Mode::Decentralized => ExecutionMode::Decentralized,
            });
            commands::evaluate::run(&cfg, &out, checkpoint, *episodes, mode)
        }
        Command::Verify { suite, checkpoints, .. } => commands::verify::run(&cfg, &out, *suite, checkpoints.as_deref()),
        Command::Ablate { .. } => commands::ablate::run(&cfg, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.exit_code())
        }
    }
}
