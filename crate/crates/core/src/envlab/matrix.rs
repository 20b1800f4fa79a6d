use super::{check_joint_action, EnvStep, Environment, Observation, Reset};
use crate::{Error, Result};

/// One-shot two-player cooperative matrix game.
///
/// The default payoff is the climbing game: a global optimum at (0, 0)
/// guarded by heavy miscoordination penalties, and a safer local optimum
/// at (1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixGame {
    payoff: Vec<Vec<f64>>,
    actions: [usize; 2],
}

impl Default for MatrixGame {
    fn default() -> Self {
        MatrixGame::new(vec![
            vec![11.0, -30.0, 0.0],
            vec![-30.0, 7.0, 6.0],
            vec![0.0, 0.0, 5.0],
        ])
        .expect("default payoff is rectangular")
    }
}

impl MatrixGame {
    pub fn new(payoff: Vec<Vec<f64>>) -> Result<Self> {
        let rows = payoff.len();
        let cols = payoff.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 || payoff.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidModel("payoff matrix must be non-empty and rectangular".into()));
        }
        if payoff.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidModel("payoff entries must be finite".into()));
        }
        Ok(MatrixGame {
            payoff,
            actions: [rows, cols],
        })
    }

    pub fn payoff(&self, a0: usize, a1: usize) -> f64 {
        self.payoff[a0][a1]
    }

    /// Expected payoff when both players act uniformly at random.
    pub fn uniform_return(&self) -> f64 {
        let n = (self.actions[0] * self.actions[1]) as f64;
        self.payoff.iter().flatten().sum::<f64>() / n
    }

    pub fn best_return(&self) -> f64 {
        self.payoff.iter().flatten().copied().fold(f64::MIN, f64::max)
    }

    fn observations() -> Vec<Observation> {
        (0..2)
            .map(|agent_id| Observation {
                agent_id,
                features: vec![1.0],
            })
            .collect()
    }
}

impl Environment for MatrixGame {
    fn num_agents(&self) -> usize {
        2
    }
    fn actions_per_agent(&self) -> &[usize] {
        &self.actions
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn horizon(&self) -> usize {
        1
    }

    fn reset(&mut self, _seed: u64) -> Reset {
        Reset {
            state: 0,
            state_features: vec![1.0],
            observations: Self::observations(),
        }
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<EnvStep> {
        check_joint_action(&self.actions, joint_action)?;
        Ok(EnvStep {
            next_state: 0,
            state_features: vec![1.0],
            observations: Self::observations(),
            reward: self.payoff[joint_action[0]][joint_action[1]],
            done: true,
        })
    }
}
