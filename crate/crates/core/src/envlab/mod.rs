//! Environments: the tabular DEC-MDP model plus the bundled toy tasks.
//!
//! Every environment hands out one shared scalar reward per step. The
//! tabular model doubles as input to the exact oracle, so it is kept as a
//! dense row-major tensor representation.

mod matrix;
mod spread;
mod tabular;

pub use matrix::MatrixGame;
pub use spread::{SpreadConfig, SpreadGrid};
pub use tabular::{decode_joint, enumeration_guard, joint_index, random_tabular, TabularDecMdp, TabularEnv, ENUMERATION_LIMIT};

use serde::{Deserialize, Serialize};

use crate::Result;

/// One agent's view of the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub agent_id: usize,
    pub features: Vec<f64>,
}

/// Result of `reset`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reset {
    pub state: usize,
    pub state_features: Vec<f64>,
    pub observations: Vec<Observation>,
}

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub next_state: usize,
    pub state_features: Vec<f64>,
    pub observations: Vec<Observation>,
    /// Shared by every agent.
    pub reward: f64,
    pub done: bool,
}

/// Which features each agent receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    #[default]
    FullState,
    LocalSlice,
}

/// A cooperative multi-agent environment with discrete per-agent actions.
pub trait Environment {
    fn num_agents(&self) -> usize;
    fn actions_per_agent(&self) -> &[usize];
    /// Length of the global state feature vector fed to conductors and critics.
    fn state_dim(&self) -> usize;
    /// Length of every agent's observation vector.
    fn obs_dim(&self) -> usize;
    /// Default episode length.
    fn horizon(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Reset;
    fn step(&mut self, joint_action: &[usize]) -> Result<EnvStep>;
}

pub(crate) fn check_joint_action(actions_per_agent: &[usize], joint_action: &[usize]) -> Result<()> {
    if joint_action.len() != actions_per_agent.len() {
        return Err(crate::Error::Dimension {
            context: "joint action",
            expected: actions_per_agent.len(),
            actual: joint_action.len(),
        });
    }
    for (agent, (&a, &n)) in joint_action.iter().zip(actions_per_agent).enumerate() {
        if a >= n {
            return Err(crate::Error::ActionOutOfRange {
                agent,
                action: a,
                num_actions: n,
            });
        }
    }
    Ok(())
}

pub(crate) fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

/// Any of the bundled environments.
#[derive(Debug, Clone)]
pub enum Env {
    Matrix(MatrixGame),
    Spread(SpreadGrid),
    Tabular(TabularEnv),
}

impl Env {
    /// The underlying tabular model, when the environment has one.
    pub fn tabular(&self) -> Option<&TabularDecMdp> {
        match self {
            Env::Tabular(t) => Some(t.mdp()),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Env::Matrix(_) => "matrix",
            Env::Spread(_) => "spread",
            Env::Tabular(_) => "tabular",
        }
    }
}

macro_rules! dispatch {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            Env::Matrix($e) => $body,
            Env::Spread($e) => $body,
            Env::Tabular($e) => $body,
        }
    };
}

impl Environment for Env {
    fn num_agents(&self) -> usize {
        dispatch!(self, e => e.num_agents())
    }
    fn actions_per_agent(&self) -> &[usize] {
        dispatch!(self, e => e.actions_per_agent())
    }
    fn state_dim(&self) -> usize {
        dispatch!(self, e => e.state_dim())
    }
    fn obs_dim(&self) -> usize {
        dispatch!(self, e => e.obs_dim())
    }
    fn horizon(&self) -> usize {
        dispatch!(self, e => e.horizon())
    }
    fn reset(&mut self, seed: u64) -> Reset {
        dispatch!(self, e => e.reset(seed))
    }
    fn step(&mut self, joint_action: &[usize]) -> Result<EnvStep> {
        dispatch!(self, e => e.step(joint_action))
    }
}

/// Declarative description of an environment, as found in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    /// Two-player one-shot matrix game; an empty payoff selects the climbing game.
    Matrix {
        #[serde(default)]
        payoff: Vec<Vec<f64>>,
    },
    Spread {
        #[serde(default = "default_spread_agents")]
        agents: usize,
        #[serde(default = "default_spread_width")]
        width: usize,
        #[serde(default = "default_spread_horizon")]
        horizon: usize,
        #[serde(default)]
        landmarks: Vec<(usize, usize)>,
        #[serde(default)]
        observation: ObservationMode,
    },
    /// A seeded random instance, or one loaded from a JSON file when `path` is set.
    Tabular {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_tabular_agents")]
        agents: usize,
        #[serde(default = "default_tabular_states")]
        states: usize,
        #[serde(default = "default_tabular_actions")]
        actions: Vec<usize>,
        #[serde(default = "default_tabular_gamma")]
        gamma: f64,
        #[serde(default = "default_tabular_horizon")]
        horizon: usize,
        #[serde(default)]
        path: Option<String>,
    },
}

fn default_spread_agents() -> usize {
    SpreadConfig::default().agents
}
fn default_spread_width() -> usize {
    SpreadConfig::default().width
}
fn default_spread_horizon() -> usize {
    SpreadConfig::default().horizon
}
fn default_tabular_agents() -> usize {
    2
}
fn default_tabular_states() -> usize {
    3
}
fn default_tabular_actions() -> Vec<usize> {
    vec![2, 2]
}
fn default_tabular_gamma() -> f64 {
    0.9
}
fn default_tabular_horizon() -> usize {
    50
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::Matrix { payoff: Vec::new() }
    }
}

impl EnvConfig {
    /// The bundled 3-state, 2-agent tabular task.
    pub fn small_tabular() -> Self {
        EnvConfig::Tabular {
            seed: 0,
            agents: default_tabular_agents(),
            states: default_tabular_states(),
            actions: default_tabular_actions(),
            gamma: default_tabular_gamma(),
            horizon: default_tabular_horizon(),
            path: None,
        }
    }

    pub fn spread() -> Self {
        let d = SpreadConfig::default();
        EnvConfig::Spread {
            agents: d.agents,
            width: d.width,
            horizon: d.horizon,
            landmarks: d.landmarks,
            observation: d.observation,
        }
    }

    pub fn build(&self) -> Result<Env> {
        Ok(match self {
            EnvConfig::Matrix { payoff } if payoff.is_empty() => Env::Matrix(MatrixGame::default()),
            EnvConfig::Matrix { payoff } => Env::Matrix(MatrixGame::new(payoff.clone())?),
            EnvConfig::Spread {
                agents,
                width,
                horizon,
                landmarks,
                observation,
            } => Env::Spread(SpreadGrid::new(SpreadConfig {
                agents: *agents,
                width: *width,
                horizon: *horizon,
                landmarks: landmarks.clone(),
                observation: *observation,
            })?),
            EnvConfig::Tabular {
                seed,
                agents,
                states,
                actions,
                gamma,
                horizon,
                path,
            } => {
                let mdp = match path {
                    Some(p) => TabularDecMdp::from_json(&std::fs::read_to_string(p)?)?,
                    None => random_tabular(*seed, *agents, *states, actions, *gamma)?,
                };
                Env::Tabular(TabularEnv::new(mdp, *horizon))
            }
        })
    }
}
