use rand::Rng;
use rand_distr::StandardNormal;

use super::kl::softmax;
use super::mixture::{JointMixturePolicy, StateMixture, StateView};
use crate::envlab::{enumeration_guard, one_hot, TabularDecMdp};
use crate::{Error, Result};

/// A joint mixture policy written out state by state.
///
/// This is the form consumed by the exact oracle: for every state it stores
/// the conductor distribution and every agent's instruction-conditional
/// action distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureTable {
    pub states: Vec<StateMixture>,
}

impl MixtureTable {
    pub fn new(states: Vec<StateMixture>) -> Result<Self> {
        let table = MixtureTable { states };
        table.validate()?;
        Ok(table)
    }

    /// Random softmax policies with standard-normal logits multiplied by `scale`.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        num_states: usize,
        k: usize,
        actions_per_agent: &[usize],
        scale: f64,
    ) -> Result<Self> {
        enumeration_guard(num_states, actions_per_agent)?;
        if k == 0 {
            return Err(Error::InvalidModel("need K >= 1".into()));
        }
        let mut draw = |n: usize| -> Vec<f64> {
            let logits: Vec<f64> = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            softmax(&logits)
        };
        let states = (0..num_states)
            .map(|_| {
                let w = draw(k);
                let cond = (0..k)
                    .map(|_| actions_per_agent.iter().map(|&a| draw(a)).collect())
                    .collect();
                StateMixture { w, cond }
            })
            .collect();
        MixtureTable::new(states)
    }

    /// Multiplies every distribution by `exp(scale * noise)` and renormalizes.
    ///
    /// Small scales yield nearby policies, which keeps bound checks non-vacuous.
    pub fn perturbed<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> Self {
        let mut jitter = |p: &[f64]| -> Vec<f64> {
            let logits: Vec<f64> = p
                .iter()
                .map(|x| x.ln() + scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            softmax(&logits)
        };
        let states = self
            .states
            .iter()
            .map(|m| StateMixture {
                w: jitter(&m.w),
                cond: m.cond.iter().map(|agents| agents.iter().map(|p| jitter(p)).collect()).collect(),
            })
            .collect();
        MixtureTable { states }
    }

    /// Tabulates a network policy on a tabular model whose state features and
    /// observations are the one-hot state.
    pub fn from_policy(policy: &JointMixturePolicy, mdp: &TabularDecMdp) -> Result<Self> {
        let states = (0..mdp.num_states)
            .map(|s| {
                let f = one_hot(s, mdp.num_states);
                let view = StateView {
                    state_features: f.clone(),
                    observations: vec![f; mdp.num_agents],
                };
                policy.state_mixture(&view)
            })
            .collect::<Result<Vec<_>>>()?;
        MixtureTable::new(states)
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn k(&self) -> usize {
        self.states[0].k()
    }

    pub fn actions_per_agent(&self) -> Vec<usize> {
        self.states[0].actions_per_agent()
    }

    pub fn at(&self, state: usize) -> &StateMixture {
        &self.states[state]
    }

    /// Checks shapes and that every distribution is normalized.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .states
            .first()
            .ok_or_else(|| Error::InvalidModel("policy table has no states".into()))?;
        let (k, apa) = (first.k(), first.actions_per_agent());
        let normalized = |p: &[f64]| p.iter().all(|x| x.is_finite() && *x >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-10;
        for (s, m) in self.states.iter().enumerate() {
            if m.k() != k || m.cond.len() != k || m.cond.iter().any(|c| c.iter().map(Vec::len).ne(apa.iter().copied())) {
                return Err(Error::InvalidModel(format!("state {s} has a different policy shape")));
            }
            if !normalized(&m.w) || m.cond.iter().flatten().any(|p| !normalized(p)) {
                return Err(Error::InvalidModel(format!("state {s} has an unnormalized distribution")));
            }
        }
        Ok(())
    }

    /// Whether this table fits the given model.
    pub fn check_model(&self, mdp: &TabularDecMdp) -> Result<()> {
        if self.num_states() != mdp.num_states || self.actions_per_agent() != mdp.actions_per_agent {
            return Err(Error::InvalidModel(format!(
                "policy over {} states with actions {:?} does not fit a model with {} states and actions {:?}",
                self.num_states(),
                self.actions_per_agent(),
                mdp.num_states,
                mdp.actions_per_agent
            )));
        }
        Ok(())
    }
}
