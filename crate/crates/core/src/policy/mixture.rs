use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::heads::{argmax, sample_categorical, ActionDist, AgentAction, AgentHead, AgentPolicy, ConductorPolicy, LocalConductor};
use super::kl::kl_categorical;
use crate::approx::{Block, Checkpoint, Mlp};
use crate::envlab::{enumeration_guard, Observation};
use crate::{Error, Result};

/// Where instructions come from at execution time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    /// One instruction drawn from the centralized conductor, broadcast to all agents.
    #[default]
    Centralized,
    /// Every agent draws its own instruction from its local conductor.
    Decentralized,
}

/// Whether the conductor distribution is learned or fixed to uniform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConductorKind {
    #[default]
    Learned,
    Uniform,
}

/// Inputs available at one state: global features for the conductor and
/// per-agent observations for agents and local conductors.
#[derive(Debug, Clone, PartialEq)]
pub struct StateView {
    pub state_features: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
}

impl StateView {
    pub fn new(state_features: Vec<f64>, observations: &[Observation]) -> Self {
        StateView {
            state_features,
            observations: observations.iter().map(|o| o.features.clone()).collect(),
        }
    }
}

/// Outcome of one joint decision.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    /// Instruction seen by each agent (all equal in centralized mode).
    pub instructions: Vec<usize>,
    /// `ln w(M | s)` in centralized mode, `sum_i ln w^i(M^i | o^i)` otherwise.
    pub conductor_log_prob: f64,
    pub actions: Vec<AgentAction>,
    pub action_log_probs: Vec<f64>,
}

/// How actions and instructions are chosen by [`JointMixturePolicy::act`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ActOptions {
    pub mode: ExecutionMode,
    pub greedy_instruction: bool,
    pub greedy_action: bool,
}

/// The mixture `pi_mar(a | s) = sum_j w(M^j | s) prod_i pi^i(a^i | o^i, M^j)`
/// restricted to one state, with discrete agent actions.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMixture {
    pub w: Vec<f64>,
    /// `cond[j][i][a]` = `pi^i(a | s, M^j)`.
    pub cond: Vec<Vec<Vec<f64>>>,
}

impl StateMixture {
    pub fn k(&self) -> usize {
        self.w.len()
    }

    pub fn actions_per_agent(&self) -> Vec<usize> {
        self.cond[0].iter().map(Vec::len).collect()
    }

    pub fn num_joint_actions(&self) -> Result<usize> {
        enumeration_guard(1, &self.actions_per_agent())
    }

    pub fn conditional_prob(&self, j: usize, joint_action: &[usize]) -> f64 {
        self.cond[j].iter().zip(joint_action).map(|(p, &a)| p[a]).product()
    }

    pub fn mixture_prob(&self, joint_action: &[usize]) -> f64 {
        (0..self.k())
            .map(|j| self.w[j] * self.conditional_prob(j, joint_action))
            .sum()
    }

    /// Enumerates `(joint action, mixture probability)`.
    pub fn joint_distribution(&self) -> Result<Vec<(Vec<usize>, f64)>> {
        let apa = self.actions_per_agent();
        let n = self.num_joint_actions()?;
        Ok((0..n)
            .map(|idx| {
                let a = crate::envlab::decode_joint(&apa, idx);
                let p = self.mixture_prob(&a);
                (a, p)
            })
            .collect())
    }

    /// KL between the instruction-conditional joint policies, by enumeration.
    pub fn conditional_joint_kl(&self, other: &StateMixture, j: usize) -> Result<f64> {
        let apa = self.actions_per_agent();
        let n = self.num_joint_actions()?;
        let mut p = Vec::with_capacity(n);
        let mut q = Vec::with_capacity(n);
        for idx in 0..n {
            let a = crate::envlab::decode_joint(&apa, idx);
            p.push(self.conditional_prob(j, &a));
            q.push(other.conditional_prob(j, &a));
        }
        kl_categorical(&p, &q)
    }
}

/// Both sides of the mixture-KL decomposition bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureKlBound {
    /// `KL(pi_mar(.|s), new_pi_mar(.|s))`.
    pub lhs: f64,
    /// `KL(w, new_w) + sum_j w_j KL(pi(.|s,M^j), new_pi(.|s,M^j))`.
    pub rhs: f64,
}

/// Evaluates the mixture KL and its log-sum upper bound at one state.
pub fn mixture_kl_bound(old: &StateMixture, new: &StateMixture) -> Result<MixtureKlBound> {
    if old.k() != new.k() || old.actions_per_agent() != new.actions_per_agent() {
        return Err(Error::InvalidModel("mixtures have different shapes".into()));
    }
    let joint_old = old.joint_distribution()?;
    let p: Vec<f64> = joint_old.iter().map(|(_, p)| *p).collect();
    let q: Vec<f64> = joint_old.iter().map(|(a, _)| new.mixture_prob(a)).collect();
    let lhs = kl_categorical(&p, &q)?;
    let mut rhs = kl_categorical(&old.w, &new.w)?;
    for j in 0..old.k() {
        if old.w[j] > 0.0 {
            rhs += old.w[j] * old.conditional_joint_kl(new, j)?;
        }
    }
    Ok(MixtureKlBound { lhs, rhs })
}

/// `sum_i KL(pi^i(.|s,M^j), new_pi^i(.|s,M^j))`.
pub fn per_agent_kl_sum(old: &StateMixture, new: &StateMixture, j: usize) -> Result<f64> {
    old.cond[j]
        .iter()
        .zip(&new.cond[j])
        .map(|(p, q)| kl_categorical(p, q))
        .sum()
}

/// Centralized conductor, agent policies and optional local conductors.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMixturePolicy {
    pub conductor: ConductorPolicy,
    pub conductor_kind: ConductorKind,
    pub agents: Vec<AgentPolicy>,
    pub local: Option<Vec<LocalConductor>>,
}

impl JointMixturePolicy {
    pub fn new(
        conductor: ConductorPolicy,
        conductor_kind: ConductorKind,
        agents: Vec<AgentPolicy>,
        local: Option<Vec<LocalConductor>>,
    ) -> Result<Self> {
        let k = conductor.k();
        if agents.is_empty() {
            return Err(Error::InvalidModel("a joint policy needs at least one agent".into()));
        }
        if agents.iter().any(|a| a.k() != k) {
            return Err(Error::InvalidModel("agent instruction spaces differ from the conductor's".into()));
        }
        if let Some(local) = &local {
            if local.len() != agents.len() || local.iter().any(|l| l.k() != k) {
                return Err(Error::InvalidModel("local conductors must match agents and K".into()));
            }
        }
        Ok(JointMixturePolicy {
            conductor,
            conductor_kind,
            agents,
            local,
        })
    }

    pub fn k(&self) -> usize {
        self.conductor.k()
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    /// `w(. | s)`.
    pub fn conductor_probs(&self, state_features: &[f64]) -> Result<Vec<f64>> {
        match self.conductor_kind {
            ConductorKind::Learned => self.conductor.probs(state_features),
            ConductorKind::Uniform => Ok(vec![1.0 / self.k() as f64; self.k()]),
        }
    }

    /// `w^i(. | o^i)`.
    pub fn local_probs(&self, agent: usize, observation: &[f64]) -> Result<Vec<f64>> {
        match (self.conductor_kind, &self.local) {
            (ConductorKind::Uniform, _) => Ok(vec![1.0 / self.k() as f64; self.k()]),
            (ConductorKind::Learned, Some(local)) => local[agent].probs(observation),
            (ConductorKind::Learned, None) if self.k() == 1 => Ok(vec![1.0]),
            (ConductorKind::Learned, None) => Err(Error::Config(
                "decentralized execution requires local conductors".into(),
            )),
        }
    }

    /// Stochastic joint decision, as used during rollout collection.
    pub fn sample_joint<R: Rng + ?Sized>(&self, view: &StateView, rng: &mut R, mode: ExecutionMode) -> Result<JointSample> {
        self.act(
            view,
            rng,
            ActOptions {
                mode,
                ..ActOptions::default()
            },
        )
    }

    pub fn act<R: Rng + ?Sized>(&self, view: &StateView, rng: &mut R, opts: ActOptions) -> Result<JointSample> {
        let n = self.num_agents();
        if view.observations.len() != n {
            return Err(Error::Dimension {
                context: "observations",
                expected: n,
                actual: view.observations.len(),
            });
        }
        // Uniform conductors have no mode; they always sample.
        let greedy_m = opts.greedy_instruction && self.conductor_kind == ConductorKind::Learned;
        let pick = |p: &[f64], rng: &mut R| if greedy_m { argmax(p) } else { sample_categorical(p, rng) };
        let (instructions, conductor_log_prob) = match opts.mode {
            ExecutionMode::Centralized => {
                let w = self.conductor_probs(&view.state_features)?;
                let m = pick(&w, rng);
                (vec![m; n], w[m].ln())
            }
            ExecutionMode::Decentralized => {
                let mut ms = Vec::with_capacity(n);
                let mut lp = 0.0;
                for (i, obs) in view.observations.iter().enumerate() {
                    let w = self.local_probs(i, obs)?;
                    let m = pick(&w, rng);
                    lp += w[m].ln();
                    ms.push(m);
                }
                (ms, lp)
            }
        };
        let mut actions = Vec::with_capacity(n);
        let mut action_log_probs = Vec::with_capacity(n);
        for ((agent, obs), &m) in self.agents.iter().zip(&view.observations).zip(&instructions) {
            let dist = agent.dist_for(obs, m)?;
            let a = if opts.greedy_action { dist.mode() } else { dist.sample(rng) };
            action_log_probs.push(dist.log_prob(&a)?);
            actions.push(a);
        }
        Ok(JointSample {
            instructions,
            conductor_log_prob,
            actions,
            action_log_probs,
        })
    }

    /// Agent actions under fixed instructions (no conductor draw); the
    /// returned conductor log-probability is 0.
    pub fn act_given<R: Rng + ?Sized>(
        &self,
        view: &StateView,
        instructions: &[usize],
        rng: &mut R,
        greedy_action: bool,
    ) -> Result<JointSample> {
        if instructions.len() != self.num_agents() || view.observations.len() != self.num_agents() {
            return Err(Error::Dimension {
                context: "fixed instructions",
                expected: self.num_agents(),
                actual: instructions.len().min(view.observations.len()),
            });
        }
        let mut actions = Vec::with_capacity(instructions.len());
        let mut action_log_probs = Vec::with_capacity(instructions.len());
        for ((agent, obs), &m) in self.agents.iter().zip(&view.observations).zip(instructions) {
            let dist = agent.dist_for(obs, m)?;
            let a = if greedy_action { dist.mode() } else { dist.sample(rng) };
            action_log_probs.push(dist.log_prob(&a)?);
            actions.push(a);
        }
        Ok(JointSample {
            instructions: instructions.to_vec(),
            conductor_log_prob: 0.0,
            actions,
            action_log_probs,
        })
    }

    /// The mixture restricted to one state; discrete agents only.
    pub fn state_mixture(&self, view: &StateView) -> Result<StateMixture> {
        let w = self.conductor_probs(&view.state_features)?;
        let mut cond = Vec::with_capacity(self.k());
        for j in 0..self.k() {
            let mut per_agent = Vec::with_capacity(self.num_agents());
            for (agent, obs) in self.agents.iter().zip(&view.observations) {
                match agent.dist_for(obs, j)? {
                    ActionDist::Categorical(p) => per_agent.push(p),
                    ActionDist::Gaussian { .. } => {
                        return Err(Error::Unsupported(
                            "mixture probabilities of continuous actions are not enumerable".into(),
                        ))
                    }
                }
            }
            cond.push(per_agent);
        }
        Ok(StateMixture { w, cond })
    }

    pub fn mixture_prob(&self, view: &StateView, joint_action: &[usize]) -> Result<f64> {
        let mix = self.state_mixture(view)?;
        if joint_action.len() != self.num_agents() {
            return Err(Error::Dimension {
                context: "joint action",
                expected: self.num_agents(),
                actual: joint_action.len(),
            });
        }
        for (agent, (&a, n)) in joint_action.iter().zip(mix.actions_per_agent()).enumerate() {
            if a >= n {
                return Err(Error::ActionOutOfRange {
                    agent,
                    action: a,
                    num_actions: n,
                });
            }
        }
        Ok(mix.mixture_prob(joint_action))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut blocks = vec![block("conductor", self.conductor.net(), Vec::new())];
        let mut kinds = vec![json!({"name": "conductor", "kind": "conductor"})];
        for (i, a) in self.agents.iter().enumerate() {
            let name = format!("agent.{i}");
            let kind = match a.head() {
                AgentHead::Categorical { actions } => json!({"name": name, "kind": "agent-discrete", "actions": actions}),
                AgentHead::Gaussian { dim } => json!({"name": name, "kind": "agent-gaussian", "dim": dim}),
            };
            kinds.push(kind);
            blocks.push(block(&name, a.net(), a.log_std().to_vec()));
        }
        if let Some(local) = &self.local {
            for (i, l) in local.iter().enumerate() {
                let name = format!("local.{i}");
                kinds.push(json!({"name": name, "kind": "local-conductor"}));
                blocks.push(block(&name, l.net(), Vec::new()));
            }
        }
        Checkpoint {
            rng: None,
            meta: json!({
                "policy": {
                    "k": self.k(),
                    "n": self.num_agents(),
                    "conductor_kind": self.conductor_kind,
                    "blocks": kinds,
                }
            }),
            blocks,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = ckpt
            .meta
            .get("policy")
            .ok_or_else(|| Error::Checkpoint("missing policy header".into()))?;
        let field = |name: &str| {
            meta.get(name)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Checkpoint(format!("policy header lacks {name}")))
        };
        let (k, n) = (field("k")?, field("n")?);
        let conductor_kind: ConductorKind = serde_json::from_value(meta.get("conductor_kind").cloned().unwrap_or_default())
            .map_err(|e| Error::Checkpoint(format!("bad conductor kind: {e}")))?;
        let kinds = meta
            .get("blocks")
            .and_then(|b| b.as_array())
            .ok_or_else(|| Error::Checkpoint("policy header lacks block kinds".into()))?;
        let kind_of = |name: &str| {
            kinds
                .iter()
                .find(|b| b.get("name").and_then(|v| v.as_str()) == Some(name))
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("no kind recorded for block {name}")))
        };
        let conductor = ConductorPolicy::new(net_from(ckpt.block("conductor")?)?.0);
        let mut agents = Vec::with_capacity(n);
        for i in 0..n {
            let name = format!("agent.{i}");
            let (net, extra) = net_from(ckpt.block(&name)?)?;
            let kind = kind_of(&name)?;
            let head = match kind.get("kind").and_then(|v| v.as_str()) {
                Some("agent-discrete") => AgentHead::Categorical {
                    actions: net.spec().output_dim,
                },
                Some("agent-gaussian") => AgentHead::Gaussian {
                    dim: net.spec().output_dim,
                },
                other => return Err(Error::Checkpoint(format!("unexpected kind {other:?} for {name}"))),
            };
            agents.push(AgentPolicy::new(net, head, k, extra)?);
        }
        let local = if ckpt.blocks.iter().any(|b| b.name.starts_with("local.")) {
            let mut v = Vec::with_capacity(n);
            for i in 0..n {
                v.push(ConductorPolicy::new(net_from(ckpt.block(&format!("local.{i}"))?)?.0));
            }
            Some(v)
        } else {
            None
        };
        JointMixturePolicy::new(conductor, conductor_kind, agents, local)
    }
}

fn block(name: &str, net: &Mlp, extra: Vec<f64>) -> Block {
    let mut values = net.gather();
    values.extend(extra);
    Block {
        name: name.to_string(),
        spec: Some(net.spec().clone()),
        values,
    }
}

fn net_from(block: &Block) -> Result<(Mlp, Vec<f64>)> {
    let spec = block
        .spec
        .clone()
        .ok_or_else(|| Error::Checkpoint(format!("block {} has no network spec", block.name)))?;
    let n = spec.num_params();
    let mut net = Mlp::zeros(spec)?;
    net.scatter(&block.values[..n])?;
    Ok((net, block.values[n..].to_vec()))
}
