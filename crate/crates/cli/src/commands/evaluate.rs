use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use anyhow::Context;
use hcpo_core::approx::read_checkpoint;
use hcpo_core::hcpo::{evaluate, iqr, median};
use hcpo_core::policy::ExecutionMode;
use hcpo_core::{Environment, JointMixturePolicy};
use serde::Serialize;

use super::{runtime, usage, Failure};
use crate::config::RunConfig;
use crate::manifest::write_atomic;

#[derive(Debug, Serialize)]
struct EvaluationReport {
    checkpoint: String,
    mode: ExecutionMode,
    episodes: usize,
    seed: u64,
    mean: f64,
    median: f64,
    iqr: f64,
    min: f64,
    max: f64,
    returns: Vec<f64>,
}

/// Greedy evaluation of a saved policy; the default mode is decentralized
/// when the checkpoint carries local conductors.
pub fn run(cfg: &RunConfig, out: &Path, checkpoint: &Path, episodes: usize, mode: Option<ExecutionMode>) -> Result<(), Failure> {
    let file = File::open(checkpoint)
        .with_context(|| format!("cannot open checkpoint {}", checkpoint.display()))
        .map_err(Failure::Runtime)?;
    let policy = read_checkpoint(BufReader::new(file))
        .and_then(|c| JointMixturePolicy::from_checkpoint(&c))
        .with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))
        .map_err(Failure::Runtime)?;
    let env = cfg.env.build().map_err(usage)?;
    let mode = mode.unwrap_or(if policy.local.is_some() {
        ExecutionMode::Decentralized
    } else {
        ExecutionMode::Centralized
    });
    let horizon = cfg.train.episode_length.unwrap_or(env.horizon());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.train.rollout_parallelism)
        .build()
        .map_err(|e| Failure::Runtime(e.into()))?;
    let seed = cfg.train.seed;
    let returns = pool
        .install(|| evaluate(&policy, &env, episodes, horizon, seed, mode))
        .map_err(runtime)?;
    let report = EvaluationReport {
        checkpoint: checkpoint.display().to_string(),
        mode,
        episodes,
        seed,
        mean: returns.iter().sum::<f64>() / returns.len().max(1) as f64,
        median: median(&returns).unwrap_or(f64::NAN),
        iqr: iqr(&returns).unwrap_or(f64::NAN),
        min: returns.iter().copied().fold(f64::INFINITY, f64::min),
        max: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        returns,
    };
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(e.into()))?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.into()))?;
    write_atomic(&out.join("evaluation.json"), text.as_bytes()).map_err(Failure::Runtime)?;
    println!(
        "{} episodes ({:?}): median {:.4}, IQR {:.4}, mean {:.4}",
        report.episodes, report.mode, report.median, report.iqr, report.mean
    );
    Ok(())
}
