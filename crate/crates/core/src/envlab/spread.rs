use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_joint_action, EnvStep, Environment, Observation, ObservationMode, Reset};
use crate::{Error, Result};

const MOVES: [(isize, isize); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];

/// Parameters of the spread gridworld.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpreadConfig {
    pub agents: usize,
    pub width: usize,
    pub horizon: usize,
    /// Landmark cells as (row, col). Empty means the built-in layout.
    pub landmarks: Vec<(usize, usize)>,
    pub observation: ObservationMode,
}

impl Default for SpreadConfig {
    fn default() -> Self {
        SpreadConfig {
            agents: 3,
            width: 3,
            horizon: 25,
            landmarks: Vec::new(),
            observation: ObservationMode::FullState,
        }
    }
}

/// N agents must cover N fixed landmarks on a W x W grid.
///
/// Each step pays `-sum over landmarks of the Manhattan distance to the
/// nearest agent`, so 0 is the best achievable per-step reward. Actions are
/// stay/up/down/left/right; moves off the grid leave the agent in place.
#[derive(Debug, Clone)]
pub struct SpreadGrid {
    config: SpreadConfig,
    landmarks: Vec<(usize, usize)>,
    actions: Vec<usize>,
    positions: Vec<(usize, usize)>,
    rng: ChaCha8Rng,
}

fn default_landmarks(width: usize, count: usize) -> Vec<(usize, usize)> {
    let w = width - 1;
    let mut cells = vec![(0, 0), (w, w), (0, w), (w, 0), (w / 2, w / 2)];
    for r in 0..width {
        for c in 0..width {
            if !cells.contains(&(r, c)) {
                cells.push((r, c));
            }
        }
    }
    cells.dedup();
    cells.truncate(count);
    cells
}

impl SpreadGrid {
    pub fn new(config: SpreadConfig) -> Result<Self> {
        if config.agents == 0 || config.width == 0 || config.horizon == 0 {
            return Err(Error::Config("spread gridworld needs agents, width and horizon >= 1".into()));
        }
        if config.agents > config.width * config.width {
            return Err(Error::Config("more landmarks than grid cells".into()));
        }
        let landmarks = if config.landmarks.is_empty() {
            default_landmarks(config.width, config.agents)
        } else {
            config.landmarks.clone()
        };
        if landmarks.len() != config.agents {
            return Err(Error::Config(format!(
                "spread gridworld needs exactly {} landmarks, got {}",
                config.agents,
                landmarks.len()
            )));
        }
        if landmarks.iter().any(|&(r, c)| r >= config.width || c >= config.width) {
            return Err(Error::Config("landmark outside the grid".into()));
        }
        Ok(SpreadGrid {
            actions: vec![MOVES.len(); config.agents],
            positions: vec![(0, 0); config.agents],
            landmarks,
            config,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn config(&self) -> &SpreadConfig {
        &self.config
    }

    pub fn landmarks(&self) -> &[(usize, usize)] {
        &self.landmarks
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    /// Places agents explicitly, e.g. for scripted tests.
    pub fn set_positions(&mut self, positions: &[(usize, usize)]) -> Result<()> {
        if positions.len() != self.config.agents {
            return Err(Error::Dimension {
                context: "agent positions",
                expected: self.config.agents,
                actual: positions.len(),
            });
        }
        if positions.iter().any(|&(r, c)| r >= self.config.width || c >= self.config.width) {
            return Err(Error::Config("agent position outside the grid".into()));
        }
        self.positions = positions.to_vec();
        Ok(())
    }

    /// Shared reward for the current layout.
    pub fn coverage_reward(&self) -> f64 {
        -self
            .landmarks
            .iter()
            .map(|&(lr, lc)| {
                self.positions
                    .iter()
                    .map(|&(r, c)| r.abs_diff(lr) + c.abs_diff(lc))
                    .min()
                    .unwrap_or(0) as f64
            })
            .sum::<f64>()
    }

    fn cells(&self) -> usize {
        self.config.width * self.config.width
    }

    fn cell(&self, (r, c): (usize, usize)) -> usize {
        r * self.config.width + c
    }

    fn state_index(&self) -> usize {
        let cells = self.cells();
        self.positions.iter().fold(0, |acc, &p| acc * cells + self.cell(p))
    }

    fn state_features(&self) -> Vec<f64> {
        let cells = self.cells();
        let mut f = vec![0.0; cells * self.config.agents];
        for (i, &p) in self.positions.iter().enumerate() {
            f[i * cells + self.cell(p)] = 1.0;
        }
        f
    }

    fn observations(&self) -> Vec<Observation> {
        match self.config.observation {
            ObservationMode::FullState => {
                let f = self.state_features();
                (0..self.config.agents)
                    .map(|agent_id| Observation {
                        agent_id,
                        features: f.clone(),
                    })
                    .collect()
            }
            ObservationMode::LocalSlice => self
                .positions
                .iter()
                .enumerate()
                .map(|(agent_id, &p)| {
                    let mut features = vec![0.0; self.cells()];
                    features[self.cell(p)] = 1.0;
                    Observation { agent_id, features }
                })
                .collect(),
        }
    }
}

impl Environment for SpreadGrid {
    fn num_agents(&self) -> usize {
        self.config.agents
    }
    fn actions_per_agent(&self) -> &[usize] {
        &self.actions
    }
    fn state_dim(&self) -> usize {
        self.cells() * self.config.agents
    }
    fn obs_dim(&self) -> usize {
        match self.config.observation {
            ObservationMode::FullState => self.state_dim(),
            ObservationMode::LocalSlice => self.cells(),
        }
    }
    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn reset(&mut self, seed: u64) -> Reset {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let w = self.config.width;
        for p in self.positions.iter_mut() {
            *p = (self.rng.random_range(0..w), self.rng.random_range(0..w));
        }
        Reset {
            state: self.state_index(),
            state_features: self.state_features(),
            observations: self.observations(),
        }
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<EnvStep> {
        check_joint_action(&self.actions, joint_action)?;
        let w = self.config.width as isize;
        for (p, &a) in self.positions.iter_mut().zip(joint_action) {
            let (dr, dc) = MOVES[a];
            let (r, c) = (p.0 as isize + dr, p.1 as isize + dc);
            if (0..w).contains(&r) && (0..w).contains(&c) {
                *p = (r as usize, c as usize);
            }
        }
        Ok(EnvStep {
            next_state: self.state_index(),
            state_features: self.state_features(),
            observations: self.observations(),
            reward: self.coverage_reward(),
            done: false,
        })
    }
}
