use std::path::Path;

use hcpo_core::envlab::random_tabular;
use hcpo_core::oracle::{
    check_performance_difference, check_theorem1, identity_suite, load_checkpoint_tables, monotonicity_audit,
    truncation_horizon, IdentityReport, MonotonicityReport, PerformanceDifference, TheoremBoundReport,
};
use hcpo_core::{MixtureTable, TabularDecMdp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{runtime, usage, Failure};
use crate::config::RunConfig;
use crate::manifest::write_atomic;

const IDENTITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    /// Recursive marginalization, telescoping advantages and the advantage split.
    Lemmas,
    /// The improvement bound, the mixture-KL bound and the performance difference.
    Bounds,
    /// Exact objective along a run's checkpoints.
    Monotonicity,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::Lemmas => "lemmas",
            Suite::Bounds => "bounds",
            Suite::Monotonicity => "monotonicity",
        }
    }
}

/// A random enumerable instance: up to 3 agents, 4 states, 3 actions, 3 instructions.
struct Instance {
    mdp: TabularDecMdp,
    table: MixtureTable,
    k: usize,
}

fn random_instance(seed: u64, rng: &mut ChaCha8Rng) -> Result<Instance, Failure> {
    let n = rng.random_range(1..=3);
    let states = rng.random_range(1..=4);
    let k = rng.random_range(1..=3);
    let actions: Vec<usize> = (0..n).map(|_| rng.random_range(1..=3)).collect();
    let gamma = rng.random_range(0.5..0.95);
    let mdp = random_tabular(seed, n, states, &actions, gamma).map_err(runtime)?;
    let scale = rng.random_range(0.3..3.0);
    let table = MixtureTable::random(rng, states, k, &actions, scale).map_err(runtime)?;
    Ok(Instance { mdp, table, k })
}

#[derive(Debug, Serialize)]
struct LemmaRow {
    seed: u64,
    agents: usize,
    states: usize,
    actions: Vec<usize>,
    k: usize,
    report: IdentityReport,
}

#[derive(Debug, Serialize)]
struct LemmaReport {
    suite: &'static str,
    instances: usize,
    max_error: f64,
    tolerance: f64,
    passed: bool,
    rows: Vec<LemmaRow>,
}

#[derive(Debug, Serialize)]
struct BoundRow {
    seed: u64,
    theorem: TheoremBoundReport,
    performance_difference: PerformanceDifference,
    within_bound: bool,
}

#[derive(Debug, Serialize)]
struct BoundReport {
    suite: &'static str,
    pairs: usize,
    perturbation: f64,
    bound_violations: usize,
    mixture_kl_violations: usize,
    performance_difference_violations: usize,
    equality_cases: usize,
    passed: bool,
    rows: Vec<BoundRow>,
}

#[derive(Debug, Serialize)]
struct AuditReport {
    suite: &'static str,
    checkpoints: String,
    fraction: f64,
    min_fraction: f64,
    passed: bool,
    audit: MonotonicityReport,
}

pub fn run(cfg: &RunConfig, out: &Path, suite: Suite, checkpoints: Option<&Path>) -> Result<(), Failure> {
    let (json, passed, summary) = match suite {
        Suite::Lemmas => lemmas(cfg)?,
        Suite::Bounds => bounds(cfg)?,
        Suite::Monotonicity => {
            let dir = checkpoints.ok_or_else(|| Failure::Usage(anyhow::anyhow!("the monotonicity suite needs --checkpoints DIR")))?;
            monotonicity(cfg, dir)?
        }
    };
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(e.into()))?;
    let path = out.join(format!("verify_{}.json", suite.name()));
    write_atomic(&path, json.as_bytes()).map_err(Failure::Runtime)?;
    println!("{summary}; report in {}", path.display());
    if passed {
        Ok(())
    } else {
        Err(Failure::Verification(format!("{} suite failed: {summary}", suite.name())))
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.into()))
}

fn lemmas(cfg: &RunConfig) -> Result<(String, bool, String), Failure> {
    let base = cfg.train.seed;
    let mut rows = Vec::new();
    for i in 0..cfg.verify.seed_count {
        let seed = base + i;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(seed, &mut rng)?;
        let report = identity_suite(&inst.mdp, &inst.table).map_err(runtime)?;
        rows.push(LemmaRow {
            seed,
            agents: inst.mdp.actions_per_agent.len(),
            states: inst.mdp.num_states,
            actions: inst.mdp.actions_per_agent.clone(),
            k: inst.k,
            report,
        });
    }
    let max_error = rows.iter().map(|r| r.report.max_err()).fold(0.0, f64::max);
    let passed = max_error < IDENTITY_TOL;
    let summary = format!("{} instances, max error {max_error:.3e}", rows.len());
    let report = LemmaReport {
        suite: "lemmas",
        instances: rows.len(),
        max_error,
        tolerance: IDENTITY_TOL,
        passed,
        rows,
    };
    Ok((to_json(&report)?, passed, summary))
}

fn bounds(cfg: &RunConfig) -> Result<(String, bool, String), Failure> {
    let base = cfg.train.seed;
    let scale = cfg.verify.perturbation;
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Failure::Usage(anyhow::anyhow!("verify.perturbation must be a finite non-negative number")));
    }
    let mut rows = Vec::new();
    for i in 0..cfg.verify.seed_count {
        let seed = base + i;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(seed, &mut rng)?;
        let new = if scale == 0.0 {
            inst.table.clone()
        } else {
            inst.table.perturbed(&mut rng, scale)
        };
        let theorem = check_theorem1(&inst.mdp, &inst.table, &new).map_err(runtime)?;
        let horizon = truncation_horizon(inst.mdp.gamma, inst.mdp.reward_bound(), 1e-9);
        let pd = check_performance_difference(&inst.mdp, &inst.table, &new, horizon).map_err(runtime)?;
        rows.push(BoundRow {
            seed,
            theorem,
            within_bound: pd.within_bound(),
            performance_difference: pd,
        });
    }
    let count = |f: &dyn Fn(&BoundRow) -> bool| rows.iter().filter(|r| f(r)).count();
    let bound_violations = count(&|r| !r.theorem.satisfied);
    let mixture_kl_violations = count(&|r| !r.theorem.mixture_kl_holds);
    let performance_difference_violations = count(&|r| !r.within_bound);
    let equality_cases = count(&|r| r.theorem.lhs.abs() <= 1e-12 && r.theorem.rhs.abs() <= 1e-12);
    let passed = bound_violations + mixture_kl_violations + performance_difference_violations == 0;
    let summary = format!(
        "{} pairs: {bound_violations} bound, {mixture_kl_violations} mixture-KL and \
         {performance_difference_violations} performance-difference violations, {equality_cases} equality cases",
        rows.len()
    );
    let report = BoundReport {
        suite: "bounds",
        pairs: rows.len(),
        perturbation: scale,
        bound_violations,
        mixture_kl_violations,
        performance_difference_violations,
        equality_cases,
        passed,
        rows,
    };
    Ok((to_json(&report)?, passed, summary))
}

fn monotonicity(cfg: &RunConfig, dir: &Path) -> Result<(String, bool, String), Failure> {
    let env = cfg.env.build().map_err(usage)?;
    let mdp = env
        .tabular()
        .ok_or_else(|| Failure::Usage(anyhow::anyhow!("the monotonicity suite needs a tabular environment (env.kind = \"tabular\")")))?;
    let (tables, accepted) = load_checkpoint_tables(dir, mdp).map_err(runtime)?;
    let audit = monotonicity_audit(mdp, &tables, &accepted, cfg.verify.tolerance).map_err(runtime)?;
    let fraction = audit.fraction();
    let passed = fraction >= cfg.verify.min_fraction;
    let summary = format!(
        "{} checkpoints, {}/{} accepted iterations non-decreasing ({fraction:.3})",
        tables.len(),
        audit.non_decreasing,
        audit.accepted_updates
    );
    let report = AuditReport {
        suite: "monotonicity",
        checkpoints: dir.display().to_string(),
        fraction,
        min_fraction: cfg.verify.min_fraction,
        passed,
        audit,
    };
    Ok((to_json(&report)?, passed, summary))
}
