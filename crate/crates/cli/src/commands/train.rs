use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::Context;
use hcpo_core::approx::write_checkpoint;
use hcpo_core::hcpo::{MetricsWriter, Trainer};

use super::{runtime, usage, Failure};
use crate::config::RunConfig;
use crate::manifest::RunManifest;

/// Trains one run, writing metrics, timings, checkpoints and the manifest into `out`.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let env = cfg.env.build().map_err(usage)?;
    let mut trainer = Trainer::new(cfg.train.clone(), env).map_err(usage)?;
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)
        .with_context(|| format!("cannot create output directory {}", ckpt_dir.display()))
        .map_err(Failure::Runtime)?;

    let mut manifest = RunManifest::start("train", cfg);
    let metrics_file = File::create(out.join("metrics.csv")).context("cannot create metrics file").map_err(Failure::Runtime)?;
    let mut metrics = MetricsWriter::new(BufWriter::new(metrics_file)).map_err(runtime)?;
    let mut timing = csv::Writer::from_path(out.join("timing.csv")).context("cannot create timing file").map_err(Failure::Runtime)?;
    timing.write_record(["iteration", "wall_clock_secs"]).map_err(|e| Failure::Runtime(e.into()))?;
    timing.flush().map_err(|e| Failure::Runtime(e.into()))?;
    manifest.artifacts = vec!["metrics.csv".into(), "timing.csv".into()];
    manifest.artifacts.push(save_checkpoint(&trainer, &ckpt_dir)?);
    manifest.write(out).map_err(Failure::Runtime)?;

    let total = cfg.train.iterations;
    let interval = cfg.output.checkpoint_interval;
    let mut error = None;
    for _ in 0..total {
        match trainer.iterate() {
            Ok(m) => {
                metrics.write(&m).map_err(runtime)?;
                timing
                    .write_record([m.iteration.to_string(), m.wall_clock_secs.to_string()])
                    .and_then(|_| timing.flush().map_err(Into::into))
                    .map_err(|e| Failure::Runtime(e.into()))?;
                log::info!(
                    "iteration {}/{total}: mean return {:.4}{}",
                    m.iteration + 1,
                    m.mean_return,
                    m.eval_return.map(|e| format!(", eval {e:.4}")).unwrap_or_default()
                );
                let done = trainer.iteration();
                if (interval > 0 && done % interval == 0) || done == total {
                    manifest.artifacts.push(save_checkpoint(&trainer, &ckpt_dir)?);
                }
            }
            Err(e) => {
                log::error!("iteration {} aborted: {e}", trainer.iteration() + 1);
                error = Some(e);
                break;
            }
        }
    }
    metrics.into_inner().map_err(runtime)?;
    manifest.finish(error.as_ref().map(|e| e.to_string()));
    manifest.write(out).map_err(Failure::Runtime)?;
    match error {
        Some(e) => Err(runtime(e)),
        None => {
            println!("trained {total} iterations; artifacts in {}", out.display());
            Ok(())
        }
    }
}

fn save_checkpoint(trainer: &Trainer, dir: &Path) -> Result<String, Failure> {
    let name = format!("iter_{:05}.ckpt", trainer.iteration());
    let path = dir.join(&name);
    let file = File::create(&path)
        .with_context(|| format!("cannot create checkpoint {}", path.display()))
        .map_err(Failure::Runtime)?;
    write_checkpoint(BufWriter::new(file), &trainer.checkpoint()).map_err(runtime)?;
    Ok(format!("checkpoints/{name}"))
}
