use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::exact_policy_eval;
use crate::approx::read_checkpoint;
use crate::envlab::TabularDecMdp;
use crate::policy::{JointMixturePolicy, MixtureTable};
use crate::{Error, Result};

/// A drop of the exact objective between consecutive policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decrease {
    /// Index of the policy after the update.
    pub index: usize,
    pub drop: f64,
    pub accepted: bool,
}

/// Exact objective along a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub objective: Vec<f64>,
    pub tolerance: f64,
    /// Updates (transitions `index - 1 -> index`) that were accepted.
    pub accepted_updates: usize,
    /// Accepted updates with `J(index) >= J(index - 1) - tolerance`.
    pub non_decreasing: usize,
    pub decreases: Vec<Decrease>,
}

impl MonotonicityReport {
    /// Fraction of accepted updates that did not decrease the objective
    /// (1 when nothing was accepted).
    pub fn fraction(&self) -> f64 {
        if self.accepted_updates == 0 {
            1.0
        } else {
            self.non_decreasing as f64 / self.accepted_updates as f64
        }
    }
}

/// Evaluates `J` exactly for each policy of a sequence and counts decreases.
///
/// `accepted[i]` tells whether the update producing `tables[i]` was accepted;
/// `accepted[0]` is ignored.
pub fn monotonicity_audit(
    mdp: &TabularDecMdp,
    tables: &[MixtureTable],
    accepted: &[bool],
    tolerance: f64,
) -> Result<MonotonicityReport> {
    if accepted.len() != tables.len() {
        return Err(Error::Dimension {
            context: "acceptance flags",
            expected: tables.len(),
            actual: accepted.len(),
        });
    }
    let objective = tables
        .iter()
        .map(|t| exact_policy_eval(mdp, t).map(|v| v.j))
        .collect::<Result<Vec<_>>>()?;
    let mut report = MonotonicityReport {
        objective,
        tolerance,
        accepted_updates: 0,
        non_decreasing: 0,
        decreases: Vec::new(),
    };
    for i in 1..tables.len() {
        let drop = report.objective[i - 1] - report.objective[i];
        if accepted[i] {
            report.accepted_updates += 1;
            if drop <= tolerance {
                report.non_decreasing += 1;
            }
        }
        if drop > tolerance {
            report.decreases.push(Decrease {
                index: i,
                drop,
                accepted: accepted[i],
            });
        }
    }
    Ok(report)
}

/// Loads every `*.ckpt` file of a directory in name order and converts the
/// policies to tables on `mdp`. The acceptance flag comes from the checkpoint
/// metadata (`true` when absent).
pub fn load_checkpoint_tables(dir: &Path, mdp: &TabularDecMdp) -> Result<(Vec<MixtureTable>, Vec<bool>)> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Checkpoint(format!("no checkpoints in {}", dir.display())));
    }
    let mut tables = Vec::with_capacity(paths.len());
    let mut accepted = Vec::with_capacity(paths.len());
    for path in paths {
        let ckpt = read_checkpoint(BufReader::new(File::open(&path)?))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let policy = JointMixturePolicy::from_checkpoint(&ckpt)?;
        tables.push(MixtureTable::from_policy(&policy, mdp)?);
        accepted.push(ckpt.meta.get("accepted").and_then(|v| v.as_bool()).unwrap_or(true));
    }
    Ok((tables, accepted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envlab::random_tabular;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn counts_only_accepted_decreases() {
        let mdp = random_tabular(1, 2, 2, &[2, 2], 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tables: Vec<_> = (0..6)
            .map(|_| MixtureTable::random(&mut rng, 2, 2, &[2, 2], 2.0).unwrap())
            .collect();
        let flags = vec![true, true, false, true, true, true];
        let r = monotonicity_audit(&mdp, &tables, &flags, 1e-9).unwrap();
        assert_eq!(r.accepted_updates, 4);
        let expected = (1..6)
            .filter(|&i| flags[i] && r.objective[i] >= r.objective[i - 1] - 1e-9)
            .count();
        assert_eq!(r.non_decreasing, expected);
        assert!(monotonicity_audit(&mdp, &tables, &flags[..2], 1e-9).is_err());
    }
}
