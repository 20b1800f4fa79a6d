use serde::{Deserialize, Serialize};

use crate::approx::Activation;
use crate::policy::ExecutionMode;
use crate::trustregion::TrustRegionConfig;
use crate::{Error, Result};

/// Which algorithm variant to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full method: learned conductor, sequential agents, distilled local conductors.
    #[default]
    Hcpo,
    /// One instruction only, i.e. plain sequential trust-region agent updates.
    NoConductor,
    /// Uniform instruction distribution; no conductor update and no distillation.
    RandomConductor,
    /// Learned conductor kept centralized at execution time (no distillation).
    CentralizedExec,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Hcpo => "hcpo",
            Variant::NoConductor => "no_conductor",
            Variant::RandomConductor => "random_conductor",
            Variant::CentralizedExec => "centralized_exec",
        }
    }

    pub fn learns_conductor(self) -> bool {
        matches!(self, Variant::Hcpo | Variant::CentralizedExec)
    }

    pub fn distills(self) -> bool {
        self == Variant::Hcpo
    }
}

/// Which conductor weights the per-sample KL of an agent update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKlWeight {
    /// The agent's local conductor before this iteration's distillation,
    /// evaluated on its own observation (the centralized pre-update conductor
    /// when the variant keeps no local conductors).
    #[default]
    LocalOld,
    /// The updated centralized conductor, the same weight the gradient uses.
    CentralNew,
}

/// Everything that shapes a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Number of instructions K.
    pub k: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Episodes collected per iteration.
    pub batch_size: usize,
    /// Episode length; the environment's own horizon when unset.
    pub episode_length: Option<usize>,
    pub iterations: usize,
    pub delta_conductor: f64,
    pub delta_agent: f64,
    pub critic_lr: f64,
    pub critic_epochs: usize,
    pub critic_minibatches: usize,
    pub distill_lr: f64,
    pub distill_epochs: usize,
    pub rollout_parallelism: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Execution mode used for evaluation; variant-dependent when unset.
    pub execution_mode: Option<ExecutionMode>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Output-layer gain of conductor and agent heads.
    pub output_gain: f64,
    pub normalize_advantages: bool,
    pub theta_clamp: f64,
    pub agent_kl_weight: AgentKlWeight,
    /// Hold one instruction for a whole episode instead of redrawing it every step.
    pub per_episode_instruction: bool,
    /// Evaluate every this many iterations (0 disables evaluation).
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub cg_iters: usize,
    pub cg_residual_tol: f64,
    pub damping: f64,
    pub backtrack_coef: f64,
    pub max_backtracks: usize,
    pub accept_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let tr = TrustRegionConfig::default();
        TrainConfig {
            k: 10,
            gamma: 0.99,
            gae_lambda: 0.95,
            batch_size: 16,
            episode_length: None,
            iterations: 100,
            delta_conductor: 0.01,
            delta_agent: 0.005,
            critic_lr: 5e-4,
            critic_epochs: 5,
            critic_minibatches: 1,
            distill_lr: 5e-4,
            distill_epochs: 5,
            rollout_parallelism: 1,
            seed: 0,
            variant: Variant::Hcpo,
            execution_mode: None,
            hidden: vec![64],
            activation: Activation::Relu,
            output_gain: 0.01,
            normalize_advantages: true,
            theta_clamp: crate::estimate::THETA_CLAMP,
            agent_kl_weight: AgentKlWeight::LocalOld,
            per_episode_instruction: false,
            eval_interval: 1,
            eval_episodes: 10,
            cg_iters: tr.cg_iters,
            cg_residual_tol: tr.cg_residual_tol,
            damping: tr.damping,
            backtrack_coef: tr.backtrack_coef,
            max_backtracks: tr.max_backtracks,
            accept_ratio: tr.accept_ratio,
        }
    }
}

impl TrainConfig {
    /// Number of instructions actually used (the no-conductor variant forces 1).
    pub fn effective_k(&self) -> usize {
        match self.variant {
            Variant::NoConductor => 1,
            _ => self.k,
        }
    }

    /// Evaluation execution mode after applying the variant's default.
    pub fn resolved_execution_mode(&self) -> ExecutionMode {
        self.execution_mode.unwrap_or(match self.variant {
            Variant::Hcpo => ExecutionMode::Decentralized,
            _ => ExecutionMode::Centralized,
        })
    }

    fn trust_region(&self, delta: f64) -> TrustRegionConfig {
        TrustRegionConfig {
            delta,
            cg_iters: self.cg_iters,
            cg_residual_tol: self.cg_residual_tol,
            damping: self.damping,
            backtrack_coef: self.backtrack_coef,
            max_backtracks: self.max_backtracks,
            accept_ratio: self.accept_ratio,
        }
    }

    pub fn conductor_trust_region(&self) -> TrustRegionConfig {
        self.trust_region(self.delta_conductor)
    }

    pub fn agent_trust_region(&self) -> TrustRegionConfig {
        self.trust_region(self.delta_agent)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return fail("batch_size and iterations must be at least 1".into());
        }
        if self.episode_length == Some(0) {
            return fail("episode_length must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return fail(format!("gamma {} must lie in [0, 1) and gae_lambda {} in [0, 1]", self.gamma, self.gae_lambda));
        }
        if self.rollout_parallelism == 0 {
            return fail("rollout_parallelism must be at least 1".into());
        }
        if self.hidden.contains(&0) {
            return fail("hidden layer widths must be positive".into());
        }
        if !(self.theta_clamp > 1.0) {
            return fail(format!("theta_clamp {} must exceed 1", self.theta_clamp));
        }
        if self.critic_lr <= 0.0 || self.distill_lr <= 0.0 {
            return fail("learning rates must be positive".into());
        }
        if self.resolved_execution_mode() == ExecutionMode::Decentralized
            && matches!(self.variant, Variant::RandomConductor | Variant::CentralizedExec)
        {
            return fail(format!(
                "variant {} keeps no distilled local conductors, so it cannot execute decentralized",
                self.variant.name()
            ));
        }
        self.conductor_trust_region().validate()?;
        self.agent_trust_region().validate()
    }
}
