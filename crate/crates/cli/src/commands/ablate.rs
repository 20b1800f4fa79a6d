use std::path::Path;

use hcpo_core::hcpo::{iqr, median, quantile, train};
use hcpo_core::Variant;

use super::{runtime, usage, Failure};
use crate::config::RunConfig;
use crate::manifest::RunManifest;

/// Score of a finished run: the median of its last ten evaluations, or the
/// mean of its last ten training-batch returns when it never evaluated.
fn final_return(out: &hcpo_core::hcpo::TrainOutcome) -> f64 {
    out.trainer.final_score().unwrap_or_else(|| {
        let h = out.history();
        let tail = &h[h.len().saturating_sub(10)..];
        tail.iter().map(|m| m.mean_return).sum::<f64>() / tail.len().max(1) as f64
    })
}

/// Runs every (variant, K) combination over the configured seeds and writes
/// per-run scores plus a summary table of median and IQR per row.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let ab = &cfg.ablate;
    if ab.variants.is_empty() || ab.seeds == 0 {
        return Err(Failure::Usage(anyhow::anyhow!("ablation needs at least one variant and one seed")));
    }
    let ks = if ab.k_values.is_empty() { vec![cfg.train.k] } else { ab.k_values.clone() };
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(e.into()))?;
    let mut manifest = RunManifest::start("ablate", cfg);
    manifest.write(out).map_err(Failure::Runtime)?;

    let csv_err = |e: csv::Error| Failure::Runtime(e.into());
    let mut runs = csv::Writer::from_path(out.join("ablate_runs.csv")).map_err(csv_err)?;
    runs.write_record(["variant", "k", "seed", "final_return", "status"]).map_err(csv_err)?;
    let mut table = csv::Writer::from_path(out.join("ablate.csv")).map_err(csv_err)?;
    table
        .write_record(["variant", "k", "seeds", "median", "iqr", "q25", "q75", "min", "max"])
        .map_err(csv_err)?;

    let mut aborted = Vec::new();
    println!("{:<18} {:>4} {:>12} {:>10}", "variant", "k", "median", "iqr");
    for &k in &ks {
        for &variant in &ab.variants {
            let mut finals = Vec::new();
            for s in 0..ab.seeds {
                let seed = cfg.train.seed + s;
                let train_cfg = hcpo_core::TrainConfig {
                    variant,
                    k,
                    seed,
                    ..cfg.train.clone()
                };
                let env = cfg.env.build().map_err(usage)?;
                let outcome = train(train_cfg, env).map_err(usage)?;
                let score = final_return(&outcome);
                let status = match &outcome.error {
                    Some(e) => {
                        log::error!("{} k={k} seed {seed} aborted: {e}", variant.name());
                        aborted.push(format!("{} k={k} seed {seed}: {e}", variant.name()));
                        "aborted"
                    }
                    None => {
                        finals.push(score);
                        "completed"
                    }
                };
                log::info!("{} k={k} seed {seed}: final return {score:.4}", variant.name());
                runs.write_record([variant.name().to_string(), k.to_string(), seed.to_string(), score.to_string(), status.into()])
                    .map_err(csv_err)?;
                runs.flush().map_err(|e| Failure::Runtime(e.into()))?;
            }
            write_row(&mut table, variant, k, &finals).map_err(csv_err)?;
            table.flush().map_err(|e| Failure::Runtime(e.into()))?;
            println!(
                "{:<18} {:>4} {:>12.4} {:>10.4}",
                variant.name(),
                k,
                median(&finals).unwrap_or(f64::NAN),
                iqr(&finals).unwrap_or(f64::NAN)
            );
        }
    }
    drop((runs, table));
    manifest.artifacts = vec!["ablate.csv".into(), "ablate_runs.csv".into()];
    let error = (!aborted.is_empty()).then(|| aborted.join("; "));
    manifest.finish(error.clone());
    manifest.write(out).map_err(Failure::Runtime)?;
    match error {
        Some(e) => Err(runtime(anyhow::anyhow!("aborted runs: {e}"))),
        None => Ok(()),
    }
}

fn write_row<W: std::io::Write>(table: &mut csv::Writer<W>, variant: Variant, k: usize, finals: &[f64]) -> csv::Result<()> {
    let stat = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    table.write_record([
        variant.name().to_string(),
        k.to_string(),
        finals.len().to_string(),
        stat(median(finals)),
        stat(iqr(finals)),
        stat(quantile(finals, 0.25)),
        stat(quantile(finals, 0.75)),
        stat(finals.iter().copied().reduce(f64::min)),
        stat(finals.iter().copied().reduce(f64::max)),
    ])
}
