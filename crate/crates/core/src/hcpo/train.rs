use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::config::{AgentKlWeight, TrainConfig};
use super::metrics::{median, IterationMetrics, UpdateSummary};
use super::rollout::{collect_rollouts, evaluate, RolloutSpec};
use super::update::{distill_local_conductor, update_agent, update_conductor, UpdateOrder};
use crate::approx::{Block, Checkpoint, Mlp, MlpSpec, RngState};
use crate::envlab::{Env, Environment};
use crate::estimate::{compute_gae, compute_returns, fit_value, split_advantages, CriticFit, TrajectoryBatch};
use crate::policy::{AgentHead, AgentPolicy, ConductorKind, ConductorPolicy, ExecutionMode, JointMixturePolicy, MixtureTable};
use crate::{Error, Result};

/// Observation points inside one iteration, for auditing the update order.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeEvent {
    /// Emitted right after the conductor step (or where it would be).
    ConductorUpdated { accepted: bool },
    /// Emitted right before agent `agent`, at sweep position `position`, is
    /// updated; `theta` is the accumulator it will use.
    AgentUpdating {
        position: usize,
        agent: usize,
        theta: Vec<f64>,
        action_adv: Vec<f64>,
    },
    /// Emitted after the agent update with the ratios it folded in.
    AgentUpdated {
        position: usize,
        agent: usize,
        old_log_probs: Vec<f64>,
        new_log_probs: Vec<f64>,
    },
}

type Probe = Box<dyn FnMut(&ProbeEvent) + Send>;

/// Owns all learnable state of a run and executes training iterations.
pub struct Trainer {
    config: TrainConfig,
    env: Env,
    horizon: usize,
    policy: JointMixturePolicy,
    critic: Mlp,
    rng: ChaCha8Rng,
    iteration: usize,
    history: Vec<IterationMetrics>,
    pool: Arc<rayon::ThreadPool>,
    probe: Option<Probe>,
}

impl Trainer {
    pub fn new(config: TrainConfig, env: Env) -> Result<Self> {
        config.validate()?;
        let k = config.effective_k();
        if let Some(mdp) = env.tabular() {
            if (mdp.gamma - config.gamma).abs() > 1e-12 {
                log::warn!("training gamma {} differs from the model's gamma {}", config.gamma, mdp.gamma);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (state_dim, obs_dim) = (env.state_dim(), env.obs_dim());
        let (hidden, act, gain) = (&config.hidden, config.activation, config.output_gain);
        let conductor = ConductorPolicy::init(state_dim, hidden, k, act, gain, &mut rng)?;
        let agents = env
            .actions_per_agent()
            .iter()
            .map(|&actions| AgentPolicy::init(obs_dim, hidden, AgentHead::Categorical { actions }, k, act, gain, 1.0, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let critic = Mlp::init(MlpSpec::new(state_dim, hidden.clone(), 1, act)?, 1.0, &mut rng)?;
        // Local conductors draw from their own stream so that every variant
        // shares the same networks and update orders for a given seed.
        let mut local_rng = ChaCha8Rng::seed_from_u64(config.seed);
        local_rng.set_stream(1);
        let local = if config.variant.distills() {
            Some(
                (0..agents.len())
                    .map(|_| ConductorPolicy::init(obs_dim, hidden, k, act, gain, &mut local_rng))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let kind = if config.variant == super::Variant::RandomConductor {
            ConductorKind::Uniform
        } else {
            ConductorKind::Learned
        };
        let policy = JointMixturePolicy::new(conductor, kind, agents, local)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.rollout_parallelism)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} rollout workers: {e}", config.rollout_parallelism)))?;
        Ok(Trainer {
            horizon: config.episode_length.unwrap_or(env.horizon()),
            config,
            env,
            policy,
            critic,
            rng,
            iteration: 0,
            history: Vec::new(),
            pool: Arc::new(pool),
            probe: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn policy(&self) -> &JointMixturePolicy {
        &self.policy
    }

    pub fn critic(&self) -> &Mlp {
        &self.critic
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &[IterationMetrics] {
        &self.history
    }

    pub fn set_probe(&mut self, probe: Probe) {
        self.probe = Some(probe);
    }

    fn emit(&mut self, event: ProbeEvent) {
        if let Some(p) = self.probe.as_mut() {
            p(&event);
        }
    }

    /// Collects the training batch of the current iteration (centralized conductor).
    pub fn collect(&self) -> Result<TrajectoryBatch> {
        let spec = RolloutSpec {
            episodes: self.config.batch_size,
            horizon: self.horizon,
            seed: self.config.seed,
            domain: self.iteration as u64,
            mode: ExecutionMode::Centralized,
            greedy: false,
            per_episode_instruction: self.config.per_episode_instruction,
        };
        let (policy, env, critic) = (&self.policy, &self.env, &self.critic);
        self.pool.install(|| collect_rollouts(policy, env, critic, &spec))
    }

    /// Greedy evaluation returns under the given execution mode.
    pub fn evaluate(&self, mode: ExecutionMode, episodes: usize) -> Result<Vec<f64>> {
        let (policy, env, horizon, seed) = (&self.policy, &self.env, self.horizon, self.config.seed);
        self.pool.install(|| evaluate(policy, env, episodes, horizon, seed, mode))
    }

    /// Tabulated mixture policy, for enumerable environments.
    pub fn mixture_table(&self) -> Result<MixtureTable> {
        let mdp = self
            .env
            .tabular()
            .ok_or_else(|| Error::Unsupported(format!("{} environment is not tabular", self.env.name())))?;
        MixtureTable::from_policy(&self.policy, mdp)
    }

    /// One pass of the algorithm on a freshly collected batch.
    pub fn iterate(&mut self) -> Result<IterationMetrics> {
        let batch = self.collect()?;
        self.iterate_on(batch)
    }

    /// The update part of an iteration, on a given batch (which is consumed
    /// and dropped at the end: the buffer does not outlive the iteration).
    pub fn iterate_on(&mut self, batch: TrajectoryBatch) -> Result<IterationMetrics> {
        let pool = Arc::clone(&self.pool);
        let metrics = pool.install(|| self.update_on(batch))?;
        self.history.push(metrics.clone());
        Ok(metrics)
    }

    fn update_on(&mut self, mut batch: TrajectoryBatch) -> Result<IterationMetrics> {
        let start = Instant::now();
        let cfg = self.config.clone();
        let n = self.policy.num_agents();
        let k = self.policy.k();

        batch.returns = compute_returns(&batch, cfg.gamma);
        let gae = compute_gae(&batch, cfg.gamma, cfg.gae_lambda);
        let mut adv = split_advantages(&gae, cfg.normalize_advantages);

        // Conductor probabilities of the sampled instructions before the update.
        let w_old: Vec<f64> = batch
            .samples()
            .map(|t| Ok(self.policy.conductor_probs(&t.state_features)?[t.instructions[0]]))
            .collect::<Result<_>>()?;

        let conductor = if cfg.variant.learns_conductor() && k > 1 {
            let (c, step) = update_conductor(&self.policy.conductor, &batch, &adv, &cfg.conductor_trust_region())?;
            self.policy.conductor = c;
            Some(UpdateSummary::from(&step))
        } else {
            None
        };
        self.emit(ProbeEvent::ConductorUpdated {
            accepted: conductor.is_some_and(|c| c.accepted),
        });

        let w_new_full: Vec<Vec<f64>> = batch
            .samples()
            .map(|t| self.policy.conductor_probs(&t.state_features))
            .collect::<Result<_>>()?;
        let w_new: Vec<f64> = batch.samples().zip(&w_new_full).map(|(t, w)| w[t.instructions[0]]).collect();

        let order = UpdateOrder::random(&mut self.rng, n);
        let mut agents = vec![None; n];
        let mut distill_loss = vec![f64::NAN; n];
        let distill = cfg.variant.distills() && self.policy.local.is_some();
        for (position, &i) in order.as_slice().iter().enumerate() {
            let kl_weights: Vec<f64> = match (cfg.agent_kl_weight, &self.policy.local) {
                (AgentKlWeight::CentralNew, _) => w_new.clone(),
                (AgentKlWeight::LocalOld, Some(local)) => batch
                    .samples()
                    .map(|t| Ok(local[i].probs(&t.observations[i])?[t.instructions[i]]))
                    .collect::<Result<_>>()?,
                (AgentKlWeight::LocalOld, None) => w_old.clone(),
            };
            if distill {
                let inputs: Vec<Vec<f64>> = batch.samples().map(|t| t.observations[i].clone()).collect();
                let local = &self.policy.local.as_ref().expect("checked above")[i];
                let (fitted, report) = distill_local_conductor(local, &inputs, &w_new_full, cfg.distill_lr, cfg.distill_epochs)?;
                self.policy.local.as_mut().expect("checked above")[i] = fitted;
                distill_loss[i] = report.loss_after;
            }
            if self.probe.is_some() {
                let event = ProbeEvent::AgentUpdating {
                    position,
                    agent: i,
                    theta: adv.theta.clone(),
                    action_adv: adv.action_adv.clone(),
                };
                self.emit(event);
            }
            let upd = update_agent(
                &self.policy.agents[i],
                i,
                &batch,
                &mut adv,
                &w_new,
                &kl_weights,
                &cfg.agent_trust_region(),
                cfg.theta_clamp,
            )?;
            if self.probe.is_some() {
                self.emit(ProbeEvent::AgentUpdated {
                    position,
                    agent: i,
                    old_log_probs: upd.old_log_probs.clone(),
                    new_log_probs: upd.new_log_probs.clone(),
                });
            }
            agents[i] = Some(UpdateSummary::from(&upd.step));
            self.policy.agents[i] = upd.policy;
        }

        let inputs: Vec<Vec<f64>> = batch.samples().map(|t| t.state_features.clone()).collect();
        let fit = CriticFit {
            lr: cfg.critic_lr,
            epochs: cfg.critic_epochs,
            minibatches: cfg.critic_minibatches,
        };
        let value_fit = fit_value(&mut self.critic, &inputs, &batch.returns, fit)?;
        let mean_return = batch.mean_episode_reward();
        batch.clear();
        drop(batch);

        let iteration = self.iteration;
        self.iteration += 1;
        let eval_return = if cfg.eval_interval > 0 && self.iteration.is_multiple_of(cfg.eval_interval) {
            let returns = evaluate(
                &self.policy,
                &self.env,
                cfg.eval_episodes,
                self.horizon,
                cfg.seed,
                cfg.resolved_execution_mode(),
            )?;
            Some(returns.iter().sum::<f64>() / returns.len().max(1) as f64)
        } else {
            None
        };
        Ok(IterationMetrics {
            iteration,
            mean_return,
            eval_return,
            conductor,
            agents: agents.into_iter().map(|a| a.expect("every agent is updated once")).collect(),
            update_order: order.as_slice().to_vec(),
            distill_loss: if distill { distill_loss } else { Vec::new() },
            theta_clamps: adv.clamp_count,
            value_loss: value_fit.loss_after(),
            wall_clock_secs: start.elapsed().as_secs_f64(),
        })
    }

    /// Median of the last ten evaluation returns.
    pub fn final_score(&self) -> Option<f64> {
        let evals: Vec<f64> = self.history.iter().filter_map(|m| m.eval_return).collect();
        median(&evals[evals.len().saturating_sub(10)..])
    }

    /// Policy, critic, progress and generator state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.policy.to_checkpoint();
        ckpt.blocks.push(Block {
            name: "critic".into(),
            spec: Some(self.critic.spec().clone()),
            values: self.critic.gather(),
        });
        ckpt.rng = Some(RngState::capture(&self.rng));
        ckpt.meta["iteration"] = json!(self.iteration);
        ckpt.meta["env"] = json!(self.env.name());
        ckpt.meta["variant"] = json!(self.config.variant);
        ckpt.meta["seed"] = json!(self.config.seed);
        if let Some(last) = self.history.last() {
            ckpt.meta["accepted"] = json!(last.any_accepted());
        }
        ckpt
    }
}

/// Result of [`train`]; `error` holds the reason of an aborted run, whose
/// history up to the failure is kept.
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub error: Option<Error>,
}

impl TrainOutcome {
    pub fn history(&self) -> &[IterationMetrics] {
        self.trainer.history()
    }
}

/// Runs `config.iterations` iterations.
pub fn train(config: TrainConfig, env: Env) -> Result<TrainOutcome> {
    let iterations = config.iterations;
    let mut trainer = Trainer::new(config, env)?;
    for _ in 0..iterations {
        if let Err(e) = trainer.iterate() {
            return Ok(TrainOutcome { trainer, error: Some(e) });
        }
    }
    Ok(TrainOutcome { trainer, error: None })
}
