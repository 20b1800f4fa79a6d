//! Exact tabular computations: policy evaluation by linear solves and
//! numerical certificates for the conditional-Q, advantage-decomposition,
//! performance-difference and improvement-bound results, plus the
//! monotonicity audit of training runs.

mod audit;

pub use audit::{load_checkpoint_tables, monotonicity_audit, Decrease, MonotonicityReport};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::envlab::{decode_joint, enumeration_guard, TabularDecMdp};
use crate::policy::{kl_categorical, mixture_kl_bound, MixtureTable, StateMixture};
use crate::{Error, Result};

/// Tolerance of the exact identities.
pub const IDENTITY_TOL: f64 = 1e-10;
/// Tolerance of the improvement bound.
pub const BOUND_TOL: f64 = 1e-9;

/// Exact values of a mixture policy on a tabular model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactValues {
    pub num_states: usize,
    pub num_joint_actions: usize,
    pub k: usize,
    /// `V(s)`.
    pub v: Vec<f64>,
    /// `Q(s, a)`, indexed `s * num_joint_actions + joint`.
    pub q: Vec<f64>,
    /// `Q(M | s)`, indexed `s * k + j`.
    pub q_m: Vec<f64>,
    /// Unnormalized discounted visitation `rho(s) = sum_t gamma^t P(s_t = s)`.
    pub visitation: Vec<f64>,
    /// `J = sum_s init(s) V(s)`.
    pub j: f64,
    /// Max-norm residual of the Bellman linear system.
    pub bellman_residual: f64,
}

impl ExactValues {
    pub fn q(&self, s: usize, joint: usize) -> f64 {
        self.q[s * self.num_joint_actions + joint]
    }

    pub fn q_m(&self, s: usize, j: usize) -> f64 {
        self.q_m[s * self.k + j]
    }

    /// `A(s, a) = Q(s, a) - V(s)`.
    pub fn advantage(&self, s: usize, joint: usize) -> f64 {
        self.q(s, joint) - self.v[s]
    }

    /// `A(M | s) = Q(M | s) - V(s)`.
    pub fn instruction_advantage(&self, s: usize, j: usize) -> f64 {
        self.q_m(s, j) - self.v[s]
    }

    /// `A(a | s, M) = Q(s, a) - Q(M | s)`.
    pub fn action_advantage(&self, s: usize, j: usize, joint: usize) -> f64 {
        self.q(s, joint) - self.q_m(s, j)
    }

    pub fn max_abs_advantage(&self) -> f64 {
        (0..self.num_states)
            .flat_map(|s| (0..self.num_joint_actions).map(move |a| (s, a)))
            .fold(0.0_f64, |m, (s, a)| m.max(self.advantage(s, a).abs()))
    }
}

/// Per state, the mixture probability of every joint action.
fn joint_policy(mdp: &TabularDecMdp, table: &MixtureTable) -> Vec<Vec<f64>> {
    let apa = &mdp.actions_per_agent;
    (0..mdp.num_states)
        .map(|s| {
            let mix = table.at(s);
            (0..mdp.num_joint_actions())
                .map(|idx| mix.mixture_prob(&decode_joint(apa, idx)))
                .collect()
        })
        .collect()
}

/// `P_pi(s, s')` and `r_pi(s)` of the mixture policy.
fn policy_dynamics(mdp: &TabularDecMdp, pi: &[Vec<f64>]) -> (DMatrix<f64>, DVector<f64>) {
    let ns = mdp.num_states;
    let mut p = DMatrix::zeros(ns, ns);
    let mut r = DVector::zeros(ns);
    for s in 0..ns {
        for (joint, &pa) in pi[s].iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            r[s] += pa * mdp.reward(s, joint);
            for (s2, &pt) in mdp.transition_row(s, joint).iter().enumerate() {
                p[(s, s2)] += pa * pt;
            }
        }
    }
    (p, r)
}

fn solve(a: DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    a.lu()
        .solve(b)
        .ok_or_else(|| Error::InvalidModel(format!("singular {what} system")))
}

fn check_policy(mdp: &TabularDecMdp, table: &MixtureTable) -> Result<()> {
    enumeration_guard(mdp.num_states, &mdp.actions_per_agent)?;
    table.check_model(mdp)
}

/// Solves `(I - gamma P_pi) V = r_pi` and derives `Q`, `Q(M|s)` and the visitation.
pub fn exact_policy_eval(mdp: &TabularDecMdp, table: &MixtureTable) -> Result<ExactValues> {
    check_policy(mdp, table)?;
    let ns = mdp.num_states;
    let nj = mdp.num_joint_actions();
    let k = table.k();
    let pi = joint_policy(mdp, table);
    let (p, r) = policy_dynamics(mdp, &pi);
    let a = DMatrix::identity(ns, ns) - p.scale(mdp.gamma);
    let v = solve(a.clone(), &r, "Bellman")?;
    let bellman_residual = (&a * &v - &r).amax();

    let mut q = vec![0.0; ns * nj];
    for s in 0..ns {
        for joint in 0..nj {
            let ev: f64 = mdp.transition_row(s, joint).iter().zip(v.iter()).map(|(p, v)| p * v).sum();
            q[s * nj + joint] = mdp.reward(s, joint) + mdp.gamma * ev;
        }
    }
    let apa = &mdp.actions_per_agent;
    let mut q_m = vec![0.0; ns * k];
    for s in 0..ns {
        let mix = table.at(s);
        for j in 0..k {
            q_m[s * k + j] = (0..nj)
                .map(|joint| mix.conditional_prob(j, &decode_joint(apa, joint)) * q[s * nj + joint])
                .sum();
        }
    }
    let init = DVector::from_column_slice(&mdp.initial_state_dist);
    let visitation = solve(DMatrix::identity(ns, ns) - p.transpose().scale(mdp.gamma), &init, "visitation")?;
    let j = init.dot(&v);
    Ok(ExactValues {
        num_states: ns,
        num_joint_actions: nj,
        k,
        v: v.iter().copied().collect(),
        q,
        q_m,
        visitation: visitation.iter().copied().collect(),
        j,
        bellman_residual,
    })
}

/// `Q(s, a)` from its own linear system over state-action pairs,
/// `Q = r + gamma P Pi Q`, independent of the state-value solve.
pub fn state_action_values(mdp: &TabularDecMdp, table: &MixtureTable) -> Result<Vec<f64>> {
    check_policy(mdp, table)?;
    let ns = mdp.num_states;
    let nj = mdp.num_joint_actions();
    let n = ns * nj;
    let pi = joint_policy(mdp, table);
    let mut a = DMatrix::identity(n, n);
    let mut b = DVector::zeros(n);
    for s in 0..ns {
        for joint in 0..nj {
            let row = s * nj + joint;
            b[row] = mdp.reward(s, joint);
            for (s2, &pt) in mdp.transition_row(s, joint).iter().enumerate() {
                if pt == 0.0 {
                    continue;
                }
                for (j2, &pa) in pi[s2].iter().enumerate() {
                    a[(row, s2 * nj + j2)] -= mdp.gamma * pt * pa;
                }
            }
        }
    }
    Ok(solve(a, &b, "state-action")?.iter().copied().collect())
}

/// A two-sided numerical comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub abs_err: f64,
}

impl IdentityCheck {
    fn new(lhs: f64, rhs: f64) -> Self {
        IdentityCheck {
            lhs,
            rhs,
            abs_err: (lhs - rhs).abs(),
        }
    }
}

fn check_prefix(mdp: &TabularDecMdp, agents: &[usize], actions: &[usize]) -> Result<()> {
    if agents.len() != actions.len() {
        return Err(Error::Dimension {
            context: "prefix actions",
            expected: agents.len(),
            actual: actions.len(),
        });
    }
    let mut seen = vec![false; mdp.num_agents];
    for (&i, &a) in agents.iter().zip(actions) {
        if i >= mdp.num_agents || seen[i] {
            return Err(Error::InvalidModel(format!("agent list {agents:?} is not a set of distinct agents")));
        }
        seen[i] = true;
        if a >= mdp.actions_per_agent[i] {
            return Err(Error::ActionOutOfRange {
                agent: i,
                action: a,
                num_actions: mdp.actions_per_agent[i],
            });
        }
    }
    Ok(())
}

/// `Q^{i_{1:l}}(a^{i_{1:l}} | s, M^j)` by marginalizing the complement agents
/// one at a time out of the one-step lookahead `r + gamma P V`.
pub fn conditional_q_recursive(
    mdp: &TabularDecMdp,
    mix: &StateMixture,
    values: &ExactValues,
    s: usize,
    j: usize,
    agents: &[usize],
    actions: &[usize],
) -> Result<f64> {
    check_prefix(mdp, agents, actions)?;
    let apa = &mdp.actions_per_agent;
    let n = mdp.num_agents;
    let mut fixed = vec![None; n];
    for (&i, &a) in agents.iter().zip(actions) {
        fixed[i] = Some(a);
    }
    // Table over the joint actions of agents[..m] in agent order, shrinking as
    // agents are summed out from the last one backwards.
    let mut table: Vec<f64> = (0..mdp.num_joint_actions())
        .map(|joint| {
            let a = decode_joint(apa, joint);
            if a.iter().zip(&fixed).all(|(x, f)| f.is_none_or(|v| v == *x)) {
                values.q(s, joint)
            } else {
                0.0
            }
        })
        .collect();
    for i in (0..n).rev() {
        let width = apa[i];
        let weights: Vec<f64> = match fixed[i] {
            Some(a) => (0..width).map(|x| if x == a { 1.0 } else { 0.0 }).collect(),
            None => mix.cond[j][i].clone(),
        };
        table = table
            .chunks(width)
            .map(|c| c.iter().zip(&weights).map(|(q, w)| q * w).sum())
            .collect();
    }
    Ok(table[0])
}

/// `E_{a^- ~ pi^-(.|s, M^j)}[Q(s, a)]` by enumerating complement joint actions,
/// with `q` given per `(state, joint)`.
pub fn conditional_q_enumerated(
    mdp: &TabularDecMdp,
    mix: &StateMixture,
    q: &[f64],
    s: usize,
    j: usize,
    agents: &[usize],
    actions: &[usize],
) -> Result<f64> {
    check_prefix(mdp, agents, actions)?;
    let apa = &mdp.actions_per_agent;
    let nj = mdp.num_joint_actions();
    let complement: Vec<usize> = (0..mdp.num_agents).filter(|i| !agents.contains(i)).collect();
    let comp_apa: Vec<usize> = complement.iter().map(|&i| apa[i]).collect();
    let count: usize = comp_apa.iter().product();
    let mut total = 0.0;
    let mut a = vec![0; mdp.num_agents];
    for (&i, &x) in agents.iter().zip(actions) {
        a[i] = x;
    }
    for idx in 0..count {
        let rest = decode_joint(&comp_apa, idx);
        let mut p = 1.0;
        for (&i, &x) in complement.iter().zip(&rest) {
            a[i] = x;
            p *= mix.cond[j][i][x];
        }
        total += p * q[s * nj + mdp.joint_index(&a)];
    }
    Ok(total)
}

/// Conditional Q of a prefix: recursive definition vs. enumerated expectation
/// of the independently solved `Q(s, a)`.
pub fn check_lemma1(
    mdp: &TabularDecMdp,
    table: &MixtureTable,
    values: &ExactValues,
    q_direct: &[f64],
    s: usize,
    j: usize,
    agents: &[usize],
    actions: &[usize],
) -> Result<IdentityCheck> {
    let mix = table.at(s);
    let lhs = conditional_q_recursive(mdp, mix, values, s, j, agents, actions)?;
    let rhs = conditional_q_enumerated(mdp, mix, q_direct, s, j, agents, actions)?;
    Ok(IdentityCheck::new(lhs, rhs))
}

/// Advantage of an ordered agent subset vs. the telescoping sum of
/// per-agent advantages; also returns the empty-prefix advantage (must be 0).
pub fn check_lemma2(
    mdp: &TabularDecMdp,
    table: &MixtureTable,
    values: &ExactValues,
    s: usize,
    j: usize,
    agents: &[usize],
    actions: &[usize],
) -> Result<(IdentityCheck, f64)> {
    let mix = table.at(s);
    let q_m = values.q_m(s, j);
    let lhs = conditional_q_enumerated(mdp, mix, &values.q, s, j, agents, actions)? - q_m;
    let mut rhs = 0.0;
    let mut prev = conditional_q_recursive(mdp, mix, values, s, j, &[], &[])?;
    let empty = prev - q_m;
    for l in 1..=agents.len() {
        let cur = conditional_q_recursive(mdp, mix, values, s, j, &agents[..l], &actions[..l])?;
        rhs += cur - prev;
        prev = cur;
    }
    Ok((IdentityCheck::new(lhs, rhs), empty))
}

/// `max |A(s,a) - A(M|s) - A(a|s,M)|` over all states, instructions and joint
/// actions, with `A(s,a)` taken from the independent state-action solve.
pub fn check_advantage_split(mdp: &TabularDecMdp, values: &ExactValues, q_direct: &[f64]) -> f64 {
    let nj = mdp.num_joint_actions();
    let mut worst = 0.0_f64;
    for s in 0..mdp.num_states {
        for j in 0..values.k {
            for joint in 0..nj {
                let a_full = q_direct[s * nj + joint] - values.v[s];
                let err = a_full - values.instruction_advantage(s, j) - values.action_advantage(s, j, joint);
                worst = worst.max(err.abs());
            }
        }
    }
    worst
}

/// All ordered subsets (of every size, including empty) of `0..n`.
pub fn ordered_subsets(n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..n {
        let mut next = Vec::new();
        for prefix in &frontier {
            for i in 0..n {
                if !prefix.contains(&i) {
                    let mut p = prefix.clone();
                    p.push(i);
                    next.push(p);
                }
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Worst errors of the identity checks on one instance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub lemma1_max_err: f64,
    pub lemma2_max_err: f64,
    pub empty_prefix_max: f64,
    pub advantage_split_max_err: f64,
    pub bellman_residual: f64,
    pub checks: usize,
}

impl IdentityReport {
    pub fn max_err(&self) -> f64 {
        self.lemma1_max_err
            .max(self.lemma2_max_err)
            .max(self.empty_prefix_max)
            .max(self.advantage_split_max_err)
    }

    pub fn passed(&self) -> bool {
        self.max_err() < IDENTITY_TOL
    }

    pub fn merge(&mut self, other: &IdentityReport) {
        self.lemma1_max_err = self.lemma1_max_err.max(other.lemma1_max_err);
        self.lemma2_max_err = self.lemma2_max_err.max(other.lemma2_max_err);
        self.empty_prefix_max = self.empty_prefix_max.max(other.empty_prefix_max);
        self.advantage_split_max_err = self.advantage_split_max_err.max(other.advantage_split_max_err);
        self.bellman_residual = self.bellman_residual.max(other.bellman_residual);
        self.checks += other.checks;
    }
}

/// Runs every identity check exhaustively (all states, instructions, ordered
/// agent subsets and their actions).
pub fn identity_suite(mdp: &TabularDecMdp, table: &MixtureTable) -> Result<IdentityReport> {
    let values = exact_policy_eval(mdp, table)?;
    let q_direct = state_action_values(mdp, table)?;
    let mut report = IdentityReport {
        advantage_split_max_err: check_advantage_split(mdp, &values, &q_direct),
        bellman_residual: values.bellman_residual,
        ..IdentityReport::default()
    };
    let subsets = ordered_subsets(mdp.num_agents);
    for s in 0..mdp.num_states {
        for j in 0..table.k() {
            for agents in &subsets {
                let sub_apa: Vec<usize> = agents.iter().map(|&i| mdp.actions_per_agent[i]).collect();
                let count: usize = sub_apa.iter().product();
                for idx in 0..count {
                    let actions = decode_joint(&sub_apa, idx);
                    let l1 = check_lemma1(mdp, table, &values, &q_direct, s, j, agents, &actions)?;
                    let (l2, empty) = check_lemma2(mdp, table, &values, s, j, agents, &actions)?;
                    report.lemma1_max_err = report.lemma1_max_err.max(l1.abs_err);
                    report.lemma2_max_err = report.lemma2_max_err.max(l2.abs_err);
                    report.empty_prefix_max = report.empty_prefix_max.max(empty.abs());
                    report.checks += 2;
                }
            }
        }
    }
    Ok(report)
}

/// Both sides of the performance-difference identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceDifference {
    /// `J(new) - J(old)` from exact evaluation.
    pub lhs: f64,
    /// Truncated `E_{tau ~ new}[sum_t gamma^t A_old(s_t, a_t)]`.
    pub rhs: f64,
    pub horizon: usize,
    /// `2 gamma^H max|A| / (1 - gamma)`.
    pub err_bound: f64,
}

/// Floating-point slack added to the analytic truncation bound: both sides
/// are sums of O(1) terms, so agreement is only defined up to round-off.
pub const ROUNDOFF_TOL: f64 = 1e-12;

impl PerformanceDifference {
    pub fn within_bound(&self) -> bool {
        (self.lhs - self.rhs).abs() <= self.err_bound + ROUNDOFF_TOL
    }
}

/// Smallest horizon with `gamma^H r_max / (1 - gamma) <= tol`.
pub fn truncation_horizon(gamma: f64, r_max: f64, tol: f64) -> usize {
    if gamma == 0.0 || r_max == 0.0 {
        return 1;
    }
    let h = ((tol * (1.0 - gamma) / r_max).ln() / gamma.ln()).ceil();
    h.max(1.0) as usize
}

/// Exact forward dynamic program over `horizon` steps for the advantage sum.
pub fn check_performance_difference(
    mdp: &TabularDecMdp,
    old: &MixtureTable,
    new: &MixtureTable,
    horizon: usize,
) -> Result<PerformanceDifference> {
    let v_old = exact_policy_eval(mdp, old)?;
    let v_new = exact_policy_eval(mdp, new)?;
    let pi_new = joint_policy(mdp, new);
    let ns = mdp.num_states;
    // Expected old-policy advantage under the new policy, per state.
    let adv: Vec<f64> = (0..ns)
        .map(|s| pi_new[s].iter().enumerate().map(|(a, p)| p * v_old.advantage(s, a)).sum())
        .collect();
    let (p_new, _) = policy_dynamics(mdp, &pi_new);
    let mut d = DVector::from_column_slice(&mdp.initial_state_dist);
    let mut rhs = 0.0;
    let mut discount = 1.0;
    for _ in 0..horizon {
        rhs += discount * d.iter().zip(&adv).map(|(x, a)| x * a).sum::<f64>();
        d = p_new.tr_mul(&d);
        discount *= mdp.gamma;
    }
    Ok(PerformanceDifference {
        lhs: v_new.j - v_old.j,
        rhs,
        horizon,
        err_bound: 2.0 * mdp.gamma.powi(horizon as i32) * v_old.max_abs_advantage() / (1.0 - mdp.gamma),
    })
}

/// Evaluation of the improvement lower bound for one policy pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremBoundReport {
    /// `4 gamma max|A| / (1 - gamma)^2`.
    pub c: f64,
    /// `J(new) - J(old)`.
    pub lhs: f64,
    /// Lower bound on `lhs`.
    pub rhs: f64,
    /// `sum_s rho(s) E_{M ~ new w} A(M|s)`.
    pub instruction_term: f64,
    /// `sum_s rho(s) E_{M ~ new w, a ~ new pi} A(a|s,M)`.
    pub action_term: f64,
    /// `max_s KL(w(.|s), new_w(.|s))`.
    pub kl_max_conductor: f64,
    /// `max_s sum_j w(M^j|s) KL(pi(.|s,M^j), new_pi(.|s,M^j))`.
    pub kl_weighted_agents: f64,
    pub satisfied: bool,
    /// Largest `lhs - rhs` of the per-state mixture-KL decomposition (must be <= 0).
    pub mixture_kl_max_excess: f64,
    pub mixture_kl_holds: bool,
}

/// Computes every term of the improvement bound exactly and checks both the
/// bound and the per-state mixture-KL decomposition.
pub fn check_theorem1(mdp: &TabularDecMdp, old: &MixtureTable, new: &MixtureTable) -> Result<TheoremBoundReport> {
    check_policy(mdp, new)?;
    let v_old = exact_policy_eval(mdp, old)?;
    let v_new = exact_policy_eval(mdp, new)?;
    let apa = &mdp.actions_per_agent;
    let nj = mdp.num_joint_actions();
    let gamma = mdp.gamma;
    let c = 4.0 * gamma * v_old.max_abs_advantage() / (1.0 - gamma).powi(2);
    let (mut instruction_term, mut action_term) = (0.0, 0.0);
    let (mut kl_max_conductor, mut kl_weighted_agents) = (0.0_f64, 0.0_f64);
    let mut mixture_kl_max_excess = f64::NEG_INFINITY;
    for s in 0..mdp.num_states {
        let (mo, mn) = (old.at(s), new.at(s));
        let mut e_instr = 0.0;
        let mut e_action = 0.0;
        let mut weighted = 0.0;
        for j in 0..v_old.k {
            e_instr += mn.w[j] * v_old.instruction_advantage(s, j);
            let mut inner = 0.0;
            for joint in 0..nj {
                inner += mn.conditional_prob(j, &decode_joint(apa, joint)) * v_old.action_advantage(s, j, joint);
            }
            e_action += mn.w[j] * inner;
            if mo.w[j] > 0.0 {
                weighted += mo.w[j] * mo.conditional_joint_kl(mn, j)?;
            }
        }
        instruction_term += v_old.visitation[s] * e_instr;
        action_term += v_old.visitation[s] * e_action;
        kl_max_conductor = kl_max_conductor.max(kl_categorical(&mo.w, &mn.w)?);
        kl_weighted_agents = kl_weighted_agents.max(weighted);
        let bound = mixture_kl_bound(mo, mn)?;
        mixture_kl_max_excess = mixture_kl_max_excess.max(bound.lhs - bound.rhs);
    }
    let lhs = v_new.j - v_old.j;
    let rhs = instruction_term + action_term - c * kl_max_conductor - c * kl_weighted_agents;
    Ok(TheoremBoundReport {
        c,
        lhs,
        rhs,
        instruction_term,
        action_term,
        kl_max_conductor,
        kl_weighted_agents,
        satisfied: lhs >= rhs - BOUND_TOL,
        mixture_kl_max_excess,
        mixture_kl_holds: mixture_kl_max_excess <= IDENTITY_TOL,
    })
}
