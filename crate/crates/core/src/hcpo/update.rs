use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approx::Adam;
use crate::estimate::{AdvantageBatch, TrajectoryBatch};
use crate::policy::{AgentAction, AgentPolicy, ConductorPolicy, DistributionModel, LocalConductor};
use crate::trustregion::{trust_region_update, SurrogateProblem, TrustRegionConfig, TrustRegionStep};
use crate::{Error, Result};

/// A permutation of agent indices: the order of one sequential sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateOrder(Vec<usize>);

impl UpdateOrder {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, num_agents: usize) -> Self {
        let mut order: Vec<usize> = (0..num_agents).collect();
        order.shuffle(rng);
        UpdateOrder(order)
    }

    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || seen[i] {
                return Err(Error::InvalidModel(format!("{order:?} is not a permutation")));
            }
            seen[i] = true;
        }
        Ok(UpdateOrder(order))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// One trust-region step on the centralized conductor, maximizing
/// `mean_b A(M_b | s_b) w(M_b | s_b) / w_old(M_b | s_b)` under the mean KL threshold.
pub fn update_conductor(
    conductor: &ConductorPolicy,
    batch: &TrajectoryBatch,
    advantages: &AdvantageBatch,
    cfg: &TrustRegionConfig,
) -> Result<(ConductorPolicy, TrustRegionStep)> {
    let inputs: Vec<Vec<f64>> = batch.samples().map(|t| t.state_features.clone()).collect();
    let actions: Vec<AgentAction> = batch.samples().map(|t| AgentAction::Discrete(t.instructions[0])).collect();
    let coefficients: Vec<f64> = batch
        .samples()
        .zip(&advantages.conductor_adv)
        .map(|(t, a)| if t.conductor_decision { *a } else { 0.0 })
        .collect();
    let kl_weights = vec![1.0; inputs.len()];
    let problem = SurrogateProblem {
        inputs: &inputs,
        actions: &actions,
        coefficients: &coefficients,
        kl_weights: &kl_weights,
    };
    trust_region_update(conductor, &problem, cfg)
}

/// Result of one agent update.
#[derive(Debug, Clone)]
pub struct AgentUpdate {
    pub policy: AgentPolicy,
    pub step: TrustRegionStep,
    /// Ratio factors clamped while advancing the accumulator.
    pub clamped: usize,
    pub old_log_probs: Vec<f64>,
    pub new_log_probs: Vec<f64>,
}

/// Network inputs (observation plus instruction one-hot) of one agent over the batch.
pub fn agent_inputs(agent: &AgentPolicy, index: usize, batch: &TrajectoryBatch) -> Result<Vec<Vec<f64>>> {
    batch
        .samples()
        .map(|t| agent.input(&t.observations[index], t.instructions[index]))
        .collect()
}

/// One trust-region step on agent `index`.
///
/// The surrogate gradient weights each sample by `w_new[b] * theta[b]` and
/// the KL by `kl_weights[b]`. Afterwards the accumulator is multiplied by the
/// realized probability ratio of this agent (identically 1 on rejection).
pub fn update_agent(
    agent: &AgentPolicy,
    index: usize,
    batch: &TrajectoryBatch,
    advantages: &mut AdvantageBatch,
    w_new: &[f64],
    kl_weights: &[f64],
    cfg: &TrustRegionConfig,
    clamp: f64,
) -> Result<AgentUpdate> {
    let inputs = agent_inputs(agent, index, batch)?;
    let actions: Vec<AgentAction> = batch.samples().map(|t| t.actions[index].clone()).collect();
    if w_new.len() != inputs.len() || advantages.theta.len() != inputs.len() {
        return Err(Error::Dimension {
            context: "agent update weights",
            expected: inputs.len(),
            actual: w_new.len().min(advantages.theta.len()),
        });
    }
    let coefficients: Vec<f64> = w_new.iter().zip(&advantages.theta).map(|(w, th)| w * th).collect();
    let problem = SurrogateProblem {
        inputs: &inputs,
        actions: &actions,
        coefficients: &coefficients,
        kl_weights,
    };
    let (policy, step) = trust_region_update(agent, &problem, cfg)?;
    let old: Vec<f64> = batch.samples().map(|t| t.action_log_probs[index]).collect();
    let new: Vec<f64> = if step.accepted {
        inputs
            .iter()
            .zip(&actions)
            .map(|(x, a)| policy.dist(x)?.log_prob(a))
            .collect::<Result<_>>()?
    } else {
        old.clone()
    };
    let clamped = advantages.theta_update(&old, &new, clamp)?;
    Ok(AgentUpdate {
        policy,
        step,
        clamped,
        old_log_probs: old,
        new_log_probs: new,
    })
}

/// Loss trajectory of one distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub loss_before: f64,
    pub loss_after: f64,
    /// Mean entropy of the targets: the lowest achievable loss.
    pub target_entropy: f64,
}

/// Mean cross-entropy `-(1/B) sum_b sum_j target_bj ln w(j | x_b)`.
pub fn cross_entropy(local: &LocalConductor, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if inputs.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        let lp = local.log_probs(x)?;
        sum -= t.iter().zip(&lp).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(sum / inputs.len() as f64)
}

/// Fits a local conductor to the centralized conductor's distributions
/// (`targets`) on the agent's observations (`inputs`) with full-batch Adam.
pub fn distill_local_conductor(
    local: &LocalConductor,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    lr: f64,
    epochs: usize,
) -> Result<(LocalConductor, DistillReport)> {
    if inputs.len() != targets.len() {
        return Err(Error::Dimension {
            context: "distillation targets",
            expected: inputs.len(),
            actual: targets.len(),
        });
    }
    let target_entropy = if targets.is_empty() {
        0.0
    } else {
        targets
            .iter()
            .map(|t| -t.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
            .sum::<f64>()
            / targets.len() as f64
    };
    let loss_before = cross_entropy(local, inputs, targets)?;
    let finite = |loss: f64| {
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(Error::NonFinite {
                what: "distillation loss",
                detail: format!("{loss}"),
            })
        }
    };
    finite(loss_before)?;
    let mut model = local.clone();
    if inputs.is_empty() {
        return Ok((
            model,
            DistillReport {
                loss_before,
                loss_after: loss_before,
                target_entropy,
            },
        ));
    }
    let mut opt = Adam::new(model.num_params(), lr);
    let mut params = model.flat();
    let scale = 1.0 / inputs.len() as f64;
    let mut prev = loss_before;
    for _ in 0..epochs {
        let mut grad = vec![0.0; params.len()];
        for (x, t) in inputs.iter().zip(targets) {
            model.grad_cross_entropy_into(x, t, scale, &mut grad)?;
        }
        opt.step(&mut params, &grad);
        model.set_flat(&params)?;
        let loss = finite(cross_entropy(&model, inputs, targets)?)?;
        if loss > prev + 1e-12 {
            log::warn!("distillation loss rose from {prev:.6e} to {loss:.6e}");
        }
        prev = loss;
    }
    Ok((
        model,
        DistillReport {
            loss_before,
            loss_after: prev,
            target_entropy,
        },
    ))
}
