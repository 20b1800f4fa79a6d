use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::approx::Mlp;
use crate::envlab::{Env, Environment};
use crate::estimate::{Episode, TrajectoryBatch, Transition};
use crate::policy::{ActOptions, ExecutionMode, JointMixturePolicy, StateView};
use crate::{Error, Result};

/// Stream tag separating evaluation episodes from training episodes.
const EVAL_DOMAIN: u64 = 1 << 63;

/// Generator for one episode, derived only from `(seed, domain, episode)` so
/// results do not depend on how episodes are spread over threads.
pub fn episode_rng(seed: u64, domain: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ episode);
    rng
}

/// How a batch of episodes is run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSpec {
    pub episodes: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Training iteration (or any other tag) mixed into the episode streams.
    pub domain: u64,
    pub mode: ExecutionMode,
    pub greedy: bool,
    pub per_episode_instruction: bool,
}

fn run_episode(
    policy: &JointMixturePolicy,
    env: &Env,
    critic: Option<&Mlp>,
    spec: &RolloutSpec,
    index: usize,
) -> Result<Episode> {
    let mut rng = episode_rng(spec.seed, spec.domain, index as u64);
    let mut env = env.clone();
    let reset = env.reset(rng.random());
    let (mut state, mut features, mut observations) = (reset.state, reset.state_features, reset.observations);
    let opts = ActOptions {
        mode: spec.mode,
        greedy_instruction: spec.greedy,
        greedy_action: spec.greedy,
    };
    let value = |f: &[f64]| -> Result<f64> { critic.map_or(Ok(0.0), |c| Ok(c.forward(f)?[0])) };
    let mut steps = Vec::with_capacity(spec.horizon);
    let mut held: Option<Vec<usize>> = None;
    for _ in 0..spec.horizon {
        let view = StateView::new(features.clone(), &observations);
        let (sample, decision) = match &held {
            Some(m) => (policy.act_given(&view, m, &mut rng, spec.greedy)?, false),
            None => (policy.act(&view, &mut rng, opts)?, true),
        };
        if spec.per_episode_instruction && held.is_none() {
            held = Some(sample.instructions.clone());
        }
        let joint: Vec<usize> = sample
            .actions
            .iter()
            .map(|a| a.discrete().ok_or_else(|| Error::Unsupported("environments take discrete actions".into())))
            .collect::<Result<_>>()?;
        let out = env.step(&joint)?;
        steps.push(Transition {
            state,
            value: value(&view.state_features)?,
            state_features: view.state_features,
            observations: view.observations,
            instructions: sample.instructions,
            actions: sample.actions,
            reward: out.reward,
            conductor_log_prob: sample.conductor_log_prob,
            action_log_probs: sample.action_log_probs,
            done: out.done,
            conductor_decision: decision,
        });
        state = out.next_state;
        features = out.state_features;
        observations = out.observations;
        if out.done {
            break;
        }
    }
    let truncated = steps.last().is_some_and(|t| !t.done);
    let bootstrap_value = if truncated { value(&features)? } else { 0.0 };
    Ok(Episode { steps, bootstrap_value })
}

/// Runs `spec.episodes` episodes against an immutable policy snapshot.
///
/// Episodes run concurrently on the current rayon pool; the batch is the
/// same for any thread count.
pub fn collect_rollouts(policy: &JointMixturePolicy, env: &Env, critic: &Mlp, spec: &RolloutSpec) -> Result<TrajectoryBatch> {
    let episodes = (0..spec.episodes)
        .into_par_iter()
        .map(|i| {
            run_episode(policy, env, Some(critic), spec, i).map_err(|e| Error::Episode {
                episode: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryBatch::new(episodes))
}

/// Undiscounted returns of greedy (mode instruction, mode action) episodes.
///
/// Uniform conductors have no mode and keep sampling their instruction.
pub fn evaluate(
    policy: &JointMixturePolicy,
    env: &Env,
    episodes: usize,
    horizon: usize,
    seed: u64,
    mode: ExecutionMode,
) -> Result<Vec<f64>> {
    let spec = RolloutSpec {
        episodes,
        horizon,
        seed,
        domain: EVAL_DOMAIN,
        mode,
        greedy: true,
        per_episode_instruction: false,
    };
    (0..episodes)
        .into_par_iter()
        .map(|i| {
            run_episode(policy, env, None, &spec, i)
                .map(|ep| ep.total_reward())
                .map_err(|e| Error::Episode {
                    episode: i,
                    source: Box::new(e),
                })
        })
        .collect()
}
