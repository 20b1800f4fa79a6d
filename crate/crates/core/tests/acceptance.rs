//! End-to-end acceptance run. Prints one `criterion N: PASS|FAIL` line per
//! criterion, also under plain `cargo test`.

mod common;

use std::io::Write;
use std::time::Instant;

use common::*;
use hcpo_core::approx::Activation;
use hcpo_core::envlab::{random_tabular, EnvConfig};
use hcpo_core::hcpo::{iqr, median, train, MetricsWriter, Trainer};
use hcpo_core::oracle::{
    check_performance_difference, check_theorem1, identity_suite, monotonicity_audit, truncation_horizon,
};
use hcpo_core::policy::{ActionDist, DistributionModel, ExecutionMode, JointMixturePolicy};
use hcpo_core::{MixtureTable, TrainConfig, TrajectoryBatch, Variant};
use rand::Rng;

struct Outcome {
    criterion: usize,
    pass: bool,
    detail: String,
}

impl Outcome {
    fn report(&self) {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        // Written to the stdout handle directly so the lines survive output capture.
        let mut out = std::io::stdout().lock();
        writeln!(out, "criterion {}: {verdict} — {}", self.criterion, self.detail).unwrap();
    }
}

fn identity_suite_on_random_instances() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1_001);
    let mut worst = 0.0_f64;
    for seed in 0..100 {
        let n = r.random_range(1..=3);
        let s = r.random_range(1..=4);
        let k = r.random_range(1..=3);
        let actions: Vec<usize> = (0..n).map(|_| r.random_range(1..=3)).collect();
        let gamma = r.random_range(0.5..0.95);
        let mdp = random_tabular(seed, n, s, &actions, gamma).unwrap();
        let table = MixtureTable::random(&mut r, s, k, &actions, 1.5).unwrap();
        worst = worst.max(identity_suite(&mdp, &table).unwrap().max_err());
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        criterion: 1,
        pass: worst < 1e-10 && secs < 120.0,
        detail: format!("100 instances, max abs error {worst:.2e}, {secs:.1}s"),
    }
}

/// Random instance plus a pair of mixture tables at a random distance.
fn random_pair<R: Rng>(r: &mut R, seed: u64) -> (hcpo_core::TabularDecMdp, MixtureTable, MixtureTable) {
    let n = r.random_range(1..=3);
    let s = r.random_range(1..=4);
    let k = r.random_range(1..=3);
    let actions: Vec<usize> = (0..n).map(|_| r.random_range(2..=3)).collect();
    let gamma = r.random_range(0.5..0.95);
    let mdp = random_tabular(seed, n, s, &actions, gamma).unwrap();
    let scale = r.random_range(0.3..3.0);
    let old = MixtureTable::random(r, s, k, &actions, scale).unwrap();
    let new = old.perturbed(r, [0.01, 0.1, 0.5, 2.0][seed as usize % 4]);
    (mdp, old, new)
}

fn inequality_suite() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2_002);
    let (mut bound_violations, mut kl_violations) = (0, 0);
    let mut tightest = f64::INFINITY;
    for seed in 0..1000 {
        let (mdp, old, new) = random_pair(&mut r, 10_000 + seed);
        let t = check_theorem1(&mdp, &old, &new).unwrap();
        bound_violations += usize::from(!t.satisfied);
        kl_violations += usize::from(!t.mixture_kl_holds);
        tightest = tightest.min(t.lhs - t.rhs);
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        criterion: 2,
        pass: bound_violations == 0 && kl_violations == 0 && secs < 300.0,
        detail: format!(
            "1000 pairs, bound violations {bound_violations}, mixture-KL violations {kl_violations}, \
             min slack {tightest:.2e}, {secs:.1}s"
        ),
    }
}

fn performance_difference_suite() -> Outcome {
    let mut r = rng(3_003);
    let mut outside = 0;
    let mut worst_ratio = 0.0_f64;
    for seed in 0..100 {
        let (mdp, old, new) = random_pair(&mut r, 20_000 + seed);
        // Mix short horizons (bound dominated by truncation) with converged ones.
        let horizon = if seed % 2 == 0 {
            r.random_range(3..30)
        } else {
            truncation_horizon(mdp.gamma, mdp.reward_bound(), 1e-9)
        };
        let pd = check_performance_difference(&mdp, &old, &new, horizon).unwrap();
        outside += usize::from(!pd.within_bound());
        if pd.err_bound > 0.0 {
            worst_ratio = worst_ratio.max((pd.lhs - pd.rhs).abs() / pd.err_bound);
        }
    }
    Outcome {
        criterion: 3,
        pass: outside == 0,
        detail: format!("100 pairs, outside bound {outside}, worst |error|/bound {worst_ratio:.3}"),
    }
}

fn numerical_kernels() -> Outcome {
    let mut grad = 0.0_f64;
    for seed in 0..5 {
        grad = grad.max(mlp_gradient_error(seed, Activation::Tanh));
        let c = smooth_conductor(seed + 10);
        grad = grad.max(log_prob_gradient_error(&c, &random_inputs(seed + 20, 5, 4), &random_actions(seed + 30, 4, 4)));
        let a = smooth_categorical_agent(seed + 40);
        let inputs = agent_inputs(&a, seed + 50, 4);
        grad = grad.max(log_prob_gradient_error(&a, &inputs, &random_actions(seed + 60, 4, 3)));
        let other = smooth_categorical_agent(seed + 70);
        let reference: Vec<ActionDist> = inputs.iter().map(|x| other.dist(x).unwrap()).collect();
        grad = grad.max(kl_gradient_error(&a, &inputs, &reference));
        let g = smooth_gaussian_agent(seed + 80);
        let inputs = agent_inputs(&g, seed + 90, 4);
        grad = grad.max(log_prob_gradient_error(&g, &inputs, &random_continuous_actions(seed + 100, 4, 2)));
    }
    let mut fvp = 0.0_f64;
    for seed in 0..5 {
        let c = smooth_conductor(seed + 200);
        fvp = fvp.max(fvp_directional_error(&c, &random_inputs(seed + 210, 5, 8), &normal_vec(&mut rng(seed + 220), c.num_params())));
        let a = smooth_categorical_agent(seed + 230);
        let v = normal_vec(&mut rng(seed + 240), a.num_params());
        fvp = fvp.max(fvp_directional_error(&a, &agent_inputs(&a, seed + 250, 8), &v));
        let g = smooth_gaussian_agent(seed + 260);
        let v = normal_vec(&mut rng(seed + 270), g.num_params());
        fvp = fvp.max(fvp_directional_error(&g, &agent_inputs(&g, seed + 280, 8), &v));
    }
    let cg = [2, 5, 10, 20, 35, 50]
        .iter()
        .enumerate()
        .map(|(seed, &dim)| cg_dense_error(seed as u64 + 300, dim))
        .fold(0.0, f64::max);
    Outcome {
        criterion: 4,
        pass: grad < 1e-4 && fvp < 1e-3 && cg < 1e-8,
        detail: format!("gradient rel err {grad:.2e}, FVP rel err {fvp:.2e}, CG abs err {cg:.2e}"),
    }
}

fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Recomputes, from a snapshot of the pre-update policy, the batch-mean KLs
/// of the conductor and of each agent (with the per-sample instruction
/// weights the agent step is constrained under).
fn realized_kls(old: &JointMixturePolicy, new: &JointMixturePolicy, batch: &TrajectoryBatch) -> (f64, Vec<f64>) {
    let n = batch.num_samples() as f64;
    let conductor = batch
        .samples()
        .map(|t| {
            let (p, q) = (old.conductor_probs(&t.state_features).unwrap(), new.conductor_probs(&t.state_features).unwrap());
            categorical_kl(&p, &q)
        })
        .sum::<f64>()
        / n;
    let agents = (0..old.num_agents())
        .map(|i| {
            batch
                .samples()
                .map(|t| {
                    let m = t.instructions[i];
                    let weight = match &old.local {
                        Some(local) => local[i].probs(&t.observations[i]).unwrap()[m],
                        None => old.conductor_probs(&t.state_features).unwrap()[m],
                    };
                    let before = old.agents[i].dist_for(&t.observations[i], m).unwrap();
                    let after = new.agents[i].dist_for(&t.observations[i], m).unwrap();
                    weight * before.kl(&after).unwrap()
                })
                .sum::<f64>()
                / n
        })
        .collect();
    (conductor, agents)
}

fn trust_region_contract() -> Outcome {
    let cfg = TrainConfig {
        k: 3,
        batch_size: 16,
        iterations: 200,
        gamma: 0.9,
        eval_interval: 0,
        ..TrainConfig::default()
    };
    let (d1, d2) = (cfg.delta_conductor, cfg.delta_agent);
    let mut t = Trainer::new(cfg, EnvConfig::small_tabular().build().unwrap()).unwrap();
    let (mut accepted, mut violations) = (0, 0);
    let (mut worst_c, mut worst_a) = (0.0_f64, 0.0_f64);
    for _ in 0..200 {
        let batch = t.collect().unwrap();
        let old = t.policy().clone();
        let m = t.iterate_on(batch.clone()).unwrap();
        let (kl_c, kl_a) = realized_kls(&old, t.policy(), &batch);
        if m.conductor.is_some_and(|c| c.accepted) {
            accepted += 1;
            worst_c = worst_c.max(kl_c / d1);
            violations += usize::from(kl_c > d1 * (1.0 + 1e-6));
        }
        for (summary, kl) in m.agents.iter().zip(&kl_a) {
            if summary.accepted {
                accepted += 1;
                worst_a = worst_a.max(kl / d2);
                violations += usize::from(*kl > d2 * (1.0 + 1e-6));
            }
        }
    }
    Outcome {
        criterion: 5,
        pass: violations == 0 && accepted > 0,
        detail: format!(
            "{accepted} accepted updates, {violations} violations, max KL/δ conductor {worst_c:.4} agents {worst_a:.4}"
        ),
    }
}

fn monotonicity() -> Outcome {
    let start = Instant::now();
    let (mut accepted, mut non_decreasing) = (0, 0);
    let mut per_seed = Vec::new();
    for seed in 0..5 {
        let cfg = TrainConfig {
            seed,
            k: 3,
            batch_size: 96,
            iterations: 200,
            gamma: 0.9,
            gae_lambda: 0.9,
            hidden: Vec::new(),
            critic_lr: 0.02,
            critic_epochs: 20,
            critic_minibatches: 10,
            eval_interval: 0,
            ..TrainConfig::default()
        };
        let env = EnvConfig::small_tabular().build().unwrap();
        let mdp = env.tabular().unwrap().clone();
        let mut t = Trainer::new(cfg, env).unwrap();
        let mut tables = vec![t.mixture_table().unwrap()];
        let mut flags = vec![true];
        for _ in 0..200 {
            flags.push(t.iterate().unwrap().any_accepted());
            tables.push(t.mixture_table().unwrap());
        }
        let report = monotonicity_audit(&mdp, &tables, &flags, 1e-3).unwrap();
        accepted += report.accepted_updates;
        non_decreasing += report.non_decreasing;
        per_seed.push(format!("{:.3}", report.fraction()));
    }
    let fraction = non_decreasing as f64 / accepted.max(1) as f64;
    Outcome {
        criterion: 6,
        pass: fraction >= 0.95,
        detail: format!(
            "{non_decreasing}/{accepted} accepted iterations non-decreasing ({fraction:.3}); per seed [{}]; {:.0}s",
            per_seed.join(", "),
            start.elapsed().as_secs_f64()
        ),
    }
}

struct VariantScores {
    variant: Variant,
    finals: Vec<f64>,
}

impl VariantScores {
    fn median(&self) -> f64 {
        median(&self.finals).unwrap()
    }
}

/// Runs the three conductor configurations over five seeds; for the HCPO
/// runs also returns the per-seed (centralized, decentralized) evaluation medians.
fn ablation_on(env: &EnvConfig, k: usize, batch_size: usize, iterations: usize, parity: bool) -> (Vec<VariantScores>, Vec<(f64, f64)>) {
    let mut pairs = Vec::new();
    let scores = [Variant::Hcpo, Variant::NoConductor, Variant::RandomConductor]
        .into_iter()
        .map(|variant| {
            let finals = (0..5)
                .map(|seed| {
                    let cfg = TrainConfig {
                        variant,
                        seed,
                        k,
                        batch_size,
                        iterations,
                        ..TrainConfig::default()
                    };
                    let out = train(cfg, env.build().unwrap()).unwrap();
                    assert!(out.error.is_none());
                    if parity && variant == Variant::Hcpo {
                        let cen = median(&out.trainer.evaluate(ExecutionMode::Centralized, 100).unwrap()).unwrap();
                        let dec = median(&out.trainer.evaluate(ExecutionMode::Decentralized, 100).unwrap()).unwrap();
                        pairs.push((cen, dec));
                    }
                    out.trainer.final_score().unwrap()
                })
                .collect();
            VariantScores { variant, finals }
        })
        .collect();
    (scores, pairs)
}

fn ablation_and_parity() -> (Outcome, Outcome) {
    let start = Instant::now();
    let (matrix, _) = ablation_on(&EnvConfig::default(), 3, 64, 100, false);
    let (spread, parity) = ablation_on(&EnvConfig::spread(), 3, 16, 100, true);
    let secs = start.elapsed().as_secs_f64();

    let mut ordered = true;
    let mut margin_env = None;
    let mut details = Vec::new();
    for (name, scores) in [("matrix", &matrix), ("spread", &spread)] {
        let hcpo = &scores[0];
        let hcpo_iqr = iqr(&hcpo.finals).unwrap();
        ordered &= scores[1..].iter().all(|s| hcpo.median() >= s.median());
        let margin = hcpo.median() - scores[2].median();
        if margin > hcpo_iqr && margin_env.is_none() {
            margin_env = Some(name);
        }
        let medians: Vec<String> = scores.iter().map(|s| format!("{} {:.3}", s.variant.name(), s.median())).collect();
        details.push(format!("{name}: {} (hcpo IQR {hcpo_iqr:.3})", medians.join(", ")));
    }
    let ablation = Outcome {
        criterion: 7,
        pass: ordered && margin_env.is_some() && secs < 1800.0,
        detail: format!(
            "{}; ordering {}, margin over random_conductor > IQR on {}; {secs:.0}s",
            details.join("; "),
            if ordered { "holds" } else { "violated" },
            margin_env.unwrap_or("no environment")
        ),
    };

    let cen = median(&parity.iter().map(|p| p.0).collect::<Vec<_>>()).unwrap();
    let dec = median(&parity.iter().map(|p| p.1).collect::<Vec<_>>()).unwrap();
    let gap = (dec - cen).abs() / cen.abs().max(1e-12);
    let per_seed: Vec<String> = parity.iter().map(|(c, d)| format!("{c:.2}/{d:.2}")).collect();
    let parity = Outcome {
        criterion: 8,
        pass: gap <= 0.1,
        detail: format!(
            "spread median return centralized {cen:.3}, decentralized {dec:.3} (gap {:.1}%); per seed cen/dec [{}]",
            100.0 * gap,
            per_seed.join(", ")
        ),
    };
    (ablation, parity)
}

fn determinism() -> Outcome {
    let run = || {
        let cfg = TrainConfig {
            k: 3,
            batch_size: 8,
            iterations: 10,
            rollout_parallelism: 1,
            seed: 42,
            ..TrainConfig::default()
        };
        let out = train(cfg, EnvConfig::spread().build().unwrap()).unwrap();
        let mut w = MetricsWriter::new(Vec::new()).unwrap();
        for m in out.history() {
            w.write(m).unwrap();
        }
        w.into_inner().unwrap()
    };
    let (a, b) = (run(), run());
    Outcome {
        criterion: 9,
        pass: a == b,
        detail: format!("two runs, {} bytes of metrics, identical: {}", a.len(), a == b),
    }
}

#[test]
fn acceptance_criteria() {
    let mut outcomes = vec![
        identity_suite_on_random_instances(),
        inequality_suite(),
        performance_difference_suite(),
        numerical_kernels(),
        trust_region_contract(),
        monotonicity(),
    ];
    let (ablation, parity) = ablation_and_parity();
    outcomes.push(ablation);
    outcomes.push(parity);
    outcomes.push(determinism());
    for o in &outcomes {
        o.report();
    }
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.pass).map(|o| o.criterion).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
