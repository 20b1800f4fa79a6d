//! Return targets, generalized advantage estimation, the two-level advantage
//! split, the sequential importance-ratio accumulator and critic fitting.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::approx::{Adam, Mlp};
use crate::policy::AgentAction;
use crate::{Error, Result};

/// Default clamp applied to every per-agent ratio folded into the accumulator.
pub const THETA_CLAMP: f64 = 20.0;

/// One recorded timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Environment state index (meaningful for enumerable environments).
    pub state: usize,
    pub state_features: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    /// Instruction seen by each agent.
    pub instructions: Vec<usize>,
    pub actions: Vec<AgentAction>,
    pub reward: f64,
    pub conductor_log_prob: f64,
    pub action_log_probs: Vec<f64>,
    /// Critic estimate `V(s_t)` at collection time.
    pub value: f64,
    pub done: bool,
    /// Whether the conductor drew the instruction at this step (false when an
    /// instruction is held for the whole episode).
    pub conductor_decision: bool,
}

/// One episode; `bootstrap_value` is `V(s_T)` when the episode was truncated
/// and 0 when it ended in a terminal state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub steps: Vec<Transition>,
    pub bootstrap_value: f64,
}

impl Episode {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|t| t.reward).sum()
    }

    fn terminal(&self) -> bool {
        self.steps.last().is_some_and(|t| t.done)
    }

    /// Value of the state after step `t`, zero past a terminal.
    fn next_value(&self, t: usize) -> f64 {
        if self.steps[t].done {
            0.0
        } else if t + 1 < self.steps.len() {
            self.steps[t + 1].value
        } else {
            self.bootstrap_value
        }
    }
}

/// Collected episodes plus their return targets.
///
/// Samples are addressed in flat episode-major order everywhere in the crate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub episodes: Vec<Episode>,
    /// Discounted return targets, flat; empty until [`compute_returns`] ran.
    pub returns: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn new(episodes: Vec<Episode>) -> Self {
        TrajectoryBatch {
            episodes,
            returns: Vec::new(),
        }
    }

    pub fn num_samples(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_samples() == 0
    }

    pub fn samples(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flat_map(|e| e.steps.iter())
    }

    pub fn mean_episode_reward(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(Episode::total_reward).sum::<f64>() / self.episodes.len() as f64
    }

    /// Empties the buffer (on-policy data is used for exactly one iteration).
    pub fn clear(&mut self) {
        self.episodes.clear();
        self.returns.clear();
    }

    /// Writes one JSON object per transition, with advantages when given.
    pub fn dump_jsonl<W: Write>(&self, mut out: W, advantages: Option<&AdvantageBatch>) -> Result<()> {
        for (idx, (ep, t, step)) in self
            .episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| ep.steps.iter().enumerate().map(move |(t, s)| (e, t, s)))
            .enumerate()
        {
            let mut row = serde_json::json!({ "episode": ep, "t": t, "transition": step });
            if let Some(r) = self.returns.get(idx) {
                row["return"] = (*r).into();
            }
            if let Some(a) = advantages {
                row["gae"] = a.gae[idx].into();
                row["conductor_adv"] = a.conductor_adv[idx].into();
                row["action_adv"] = a.action_adv[idx].into();
                row["theta"] = a.theta[idx].into();
            }
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Discounted return-to-go per sample, bootstrapped at truncation.
pub fn compute_returns(batch: &TrajectoryBatch, gamma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch.num_samples());
    for ep in &batch.episodes {
        let mut ret = vec![0.0; ep.steps.len()];
        let mut acc = if ep.terminal() { 0.0 } else { ep.bootstrap_value };
        for t in (0..ep.steps.len()).rev() {
            if ep.steps[t].done {
                acc = 0.0;
            }
            acc = ep.steps[t].reward + gamma * acc;
            ret[t] = acc;
        }
        out.extend(ret);
    }
    out
}

/// `A_t = sum_k (gamma lambda)^k delta_{t+k}` per episode.
pub fn compute_gae(batch: &TrajectoryBatch, gamma: f64, lambda: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch.num_samples());
    for ep in &batch.episodes {
        let mut adv = vec![0.0; ep.steps.len()];
        let mut acc = 0.0;
        for t in (0..ep.steps.len()).rev() {
            let step = &ep.steps[t];
            let delta = step.reward + gamma * ep.next_value(t) - step.value;
            if step.done {
                acc = 0.0;
            }
            acc = delta + gamma * lambda * acc;
            adv[t] = acc;
        }
        out.extend(adv);
    }
    out
}

/// Instruction-level and action-level advantages plus the ratio accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageBatch {
    pub gae: Vec<f64>,
    pub conductor_adv: Vec<f64>,
    pub action_adv: Vec<f64>,
    pub theta: Vec<f64>,
    /// Number of ratio factors clamped so far.
    pub clamp_count: usize,
}

/// Uses the sampled estimate at both levels, normalizing each independently.
///
/// The accumulator starts equal to the action-level advantage.
pub fn split_advantages(gae: &[f64], normalize: bool) -> AdvantageBatch {
    let level = |v: &[f64]| if normalize { normalized(v) } else { v.to_vec() };
    let conductor_adv = level(gae);
    let action_adv = level(gae);
    AdvantageBatch {
        gae: gae.to_vec(),
        theta: action_adv.clone(),
        conductor_adv,
        action_adv,
        clamp_count: 0,
    }
}

/// Zero mean, unit (population) standard deviation; a constant vector maps to zeros.
fn normalized(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let centered: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let std = (centered.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    if std <= 1e-12 * (1.0 + mean.abs()) {
        return vec![0.0; v.len()];
    }
    centered.into_iter().map(|x| x / std).collect()
}

impl AdvantageBatch {
    /// Folds one agent's probability ratio `exp(new - old)` into the accumulator.
    ///
    /// Ratios above `clamp` are clamped; returns how many were.
    pub fn theta_update(&mut self, old_log_probs: &[f64], new_log_probs: &[f64], clamp: f64) -> Result<usize> {
        let n = self.theta.len();
        for (context, len) in [("old log-probs", old_log_probs.len()), ("new log-probs", new_log_probs.len())] {
            if len != n {
                return Err(Error::Dimension {
                    context,
                    expected: n,
                    actual: len,
                });
            }
        }
        let mut clamped = 0;
        for ((theta, old), new) in self.theta.iter_mut().zip(old_log_probs).zip(new_log_probs) {
            let mut ratio = (new - old).exp();
            if !ratio.is_finite() || ratio > clamp {
                ratio = clamp;
                clamped += 1;
            }
            *theta *= ratio;
        }
        self.clamp_count += clamped;
        Ok(clamped)
    }
}

/// Critic optimization settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticFit {
    pub lr: f64,
    pub epochs: usize,
    pub minibatches: usize,
}

/// Loss trajectory of one fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub loss_before: f64,
    /// Full-batch loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl FitReport {
    pub fn loss_after(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.loss_before)
    }
}

/// Mean squared error of a scalar-output network.
pub fn value_loss(critic: &Mlp, inputs: &[Vec<f64>], targets: &[f64]) -> Result<f64> {
    if inputs.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (x, y) in inputs.iter().zip(targets) {
        let v = critic.forward(x)?[0];
        sum += (v - y).powi(2);
    }
    Ok(sum / inputs.len() as f64)
}

/// Regresses the critic onto `targets` with Adam, contiguous minibatches.
///
/// A full-batch loss increase between epochs is logged as a warning; a
/// non-finite loss aborts.
pub fn fit_value(critic: &mut Mlp, inputs: &[Vec<f64>], targets: &[f64], fit: CriticFit) -> Result<FitReport> {
    if inputs.len() != targets.len() {
        return Err(Error::Dimension {
            context: "critic targets",
            expected: inputs.len(),
            actual: targets.len(),
        });
    }
    let loss_before = value_loss(critic, inputs, targets)?;
    check_finite(loss_before)?;
    let mut report = FitReport {
        loss_before,
        epoch_losses: Vec::with_capacity(fit.epochs),
    };
    if inputs.is_empty() {
        return Ok(report);
    }
    let mut opt = Adam::new(critic.num_params(), fit.lr);
    let chunk = inputs.len().div_ceil(fit.minibatches.max(1));
    let mut params = critic.gather();
    let mut prev = loss_before;
    for _ in 0..fit.epochs {
        for (xs, ys) in inputs.chunks(chunk).zip(targets.chunks(chunk)) {
            let mut grad = vec![0.0; params.len()];
            let scale = 2.0 / xs.len() as f64;
            for (x, y) in xs.iter().zip(ys) {
                let trace = critic.trace(x)?;
                let err = trace.output()[0] - y;
                critic.backward_into(&trace, &[err], scale, &mut grad)?;
            }
            opt.step(&mut params, &grad);
            critic.scatter(&params)?;
        }
        let loss = value_loss(critic, inputs, targets)?;
        check_finite(loss)?;
        if loss > prev {
            log::warn!("critic loss rose from {prev:.6e} to {loss:.6e}");
        }
        prev = loss;
        report.epoch_losses.push(loss);
    }
    Ok(report)
}

fn check_finite(loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: "critic loss",
            detail: format!("{loss}"),
        })
    }
}
