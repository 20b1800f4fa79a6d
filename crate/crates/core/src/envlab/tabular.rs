use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_joint_action, one_hot, EnvStep, Environment, Observation, Reset};
use crate::{Error, Result};

/// Largest number of (state, joint-action) cells we are willing to enumerate.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

const ROW_TOL: f64 = 1e-12;
const FORMAT_VERSION: &str = "tabular-v1";

/// Refuse instances whose (state, joint action) table exceeds [`ENUMERATION_LIMIT`].
///
/// Returns the number of joint actions on success.
pub fn enumeration_guard(num_states: usize, actions_per_agent: &[usize]) -> Result<usize> {
    let mut entries = num_states as u128;
    for &a in actions_per_agent {
        entries = entries.saturating_mul(a as u128);
    }
    if entries > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            entries,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(actions_per_agent.iter().product())
}

/// A fully enumerable decentralized MDP with a shared reward.
///
/// Joint actions are flattened row-major with agent 0 as the most
/// significant digit. `transition` is indexed `[state][joint][next_state]`
/// and `reward` is indexed `[state][joint]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularDecMdp {
    version: String,
    pub num_agents: usize,
    pub num_states: usize,
    pub actions_per_agent: Vec<usize>,
    pub gamma: f64,
    pub initial_state_dist: Vec<f64>,
    pub reward: Vec<f64>,
    pub transition: Vec<f64>,
}

impl TabularDecMdp {
    /// Builds and validates an instance.
    pub fn new(
        actions_per_agent: Vec<usize>,
        num_states: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        initial_state_dist: Vec<f64>,
    ) -> Result<Self> {
        let mdp = TabularDecMdp {
            version: FORMAT_VERSION.to_string(),
            num_agents: actions_per_agent.len(),
            num_states,
            actions_per_agent,
            gamma,
            initial_state_dist,
            reward,
            transition,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn num_joint_actions(&self) -> usize {
        self.actions_per_agent.iter().product()
    }

    pub fn joint_index(&self, joint_action: &[usize]) -> usize {
        joint_index(&self.actions_per_agent, joint_action)
    }

    pub fn decode_joint(&self, index: usize) -> Vec<usize> {
        decode_joint(&self.actions_per_agent, index)
    }

    pub fn reward(&self, state: usize, joint: usize) -> f64 {
        self.reward[state * self.num_joint_actions() + joint]
    }

    pub fn transition_row(&self, state: usize, joint: usize) -> &[f64] {
        let s = self.num_states;
        let start = (state * self.num_joint_actions() + joint) * s;
        &self.transition[start..start + s]
    }

    /// Largest absolute reward.
    pub fn reward_bound(&self) -> f64 {
        self.reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::InvalidModel(format!(
                "unsupported tabular format version {:?}",
                self.version
            )));
        }
        if self.num_agents == 0 || self.num_states == 0 {
            return Err(Error::InvalidModel("need at least one agent and one state".into()));
        }
        if self.actions_per_agent.len() != self.num_agents || self.actions_per_agent.contains(&0) {
            return Err(Error::InvalidModel("every agent needs at least one action".into()));
        }
        let joint = enumeration_guard(self.num_states, &self.actions_per_agent)?;
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidModel(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        let cells = self.num_states * joint;
        if self.reward.len() != cells {
            return Err(Error::Dimension {
                context: "reward tensor",
                expected: cells,
                actual: self.reward.len(),
            });
        }
        if self.transition.len() != cells * self.num_states {
            return Err(Error::Dimension {
                context: "transition tensor",
                expected: cells * self.num_states,
                actual: self.transition.len(),
            });
        }
        if let Some(r) = self.reward.iter().find(|r| !r.is_finite()) {
            return Err(Error::InvalidModel(format!("non-finite reward {r}")));
        }
        check_distribution("initial state distribution", &self.initial_state_dist, self.num_states)?;
        for (row, chunk) in self.transition.chunks(self.num_states).enumerate() {
            check_distribution("transition row", chunk, self.num_states).map_err(|e| {
                Error::InvalidModel(format!("row {} (state {}, joint {}): {e}", row, row / joint, row % joint))
            })?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mdp: TabularDecMdp = serde_json::from_str(text)?;
        mdp.validate()?;
        Ok(mdp)
    }
}

fn check_distribution(what: &str, p: &[f64], len: usize) -> Result<()> {
    if p.len() != len {
        return Err(Error::InvalidModel(format!("{what} has length {}, expected {len}", p.len())));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidModel(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidModel(format!("{what} sums to {sum}")));
    }
    Ok(())
}

pub fn joint_index(actions_per_agent: &[usize], joint_action: &[usize]) -> usize {
    joint_action
        .iter()
        .zip(actions_per_agent)
        .fold(0, |acc, (&a, &n)| acc * n + a)
}

pub fn decode_joint(actions_per_agent: &[usize], mut index: usize) -> Vec<usize> {
    let mut out = vec![0; actions_per_agent.len()];
    for (slot, &n) in out.iter_mut().zip(actions_per_agent).rev() {
        *slot = index % n;
        index /= n;
    }
    out
}

/// Normalized i.i.d. exponential draws, i.e. a flat Dirichlet sample.
fn dirichlet_row<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..len)
        .map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-12)
        .collect();
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= sum);
    // Push residual rounding into the largest entry so the row sums to 1.
    let total: f64 = row.iter().sum();
    let (imax, _) = row
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
    row[imax] += 1.0 - total;
    row
}

/// Generates a reproducible random instance.
pub fn random_tabular(
    seed: u64,
    num_agents: usize,
    num_states: usize,
    actions_per_agent: &[usize],
    gamma: f64,
) -> Result<TabularDecMdp> {
    if actions_per_agent.len() != num_agents {
        return Err(Error::Dimension {
            context: "actions_per_agent",
            expected: num_agents,
            actual: actions_per_agent.len(),
        });
    }
    let joint = enumeration_guard(num_states, actions_per_agent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = num_states * joint;
    let mut transition = Vec::with_capacity(cells * num_states);
    for _ in 0..cells {
        transition.extend(dirichlet_row(&mut rng, num_states));
    }
    let reward = (0..cells).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let init = dirichlet_row(&mut rng, num_states);
    TabularDecMdp::new(actions_per_agent.to_vec(), num_states, transition, reward, gamma, init)
}

/// Steppable wrapper over a [`TabularDecMdp`]; observations are the one-hot global state.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    mdp: TabularDecMdp,
    horizon: usize,
    state: usize,
    rng: ChaCha8Rng,
}

impl TabularEnv {
    pub fn new(mdp: TabularDecMdp, horizon: usize) -> Self {
        TabularEnv {
            mdp,
            horizon,
            state: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn mdp(&self) -> &TabularDecMdp {
        &self.mdp
    }

    pub fn state(&self) -> usize {
        self.state
    }

    fn features(&self) -> Vec<f64> {
        one_hot(self.state, self.mdp.num_states)
    }

    fn observations(&self) -> Vec<Observation> {
        let f = self.features();
        (0..self.mdp.num_agents)
            .map(|agent_id| Observation {
                agent_id,
                features: f.clone(),
            })
            .collect()
    }
}

fn sample_index<R: Rng>(rng: &mut R, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    // Rounding fallthrough: last state with nonzero mass.
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

impl Environment for TabularEnv {
    fn num_agents(&self) -> usize {
        self.mdp.num_agents
    }
    fn actions_per_agent(&self) -> &[usize] {
        &self.mdp.actions_per_agent
    }
    fn state_dim(&self) -> usize {
        self.mdp.num_states
    }
    fn obs_dim(&self) -> usize {
        self.mdp.num_states
    }
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, seed: u64) -> Reset {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = sample_index(&mut self.rng, &self.mdp.initial_state_dist);
        Reset {
            state: self.state,
            state_features: self.features(),
            observations: self.observations(),
        }
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<EnvStep> {
        check_joint_action(&self.mdp.actions_per_agent, joint_action)?;
        let joint = self.mdp.joint_index(joint_action);
        let reward = self.mdp.reward(self.state, joint);
        let next = sample_index(&mut self.rng, self.mdp.transition_row(self.state, joint));
        self.state = next;
        Ok(EnvStep {
            next_state: next,
            state_features: self.features(),
            observations: self.observations(),
            reward,
            done: false,
        })
    }
}
