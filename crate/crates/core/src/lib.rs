//! Hierarchical conductor-based trust-region policy optimization for
//! cooperative multi-agent tasks, plus an exact tabular oracle.
//!
//! A centralized *conductor* picks one of `K` latent instructions per step;
//! every agent acts on its own observation and the broadcast instruction.
//! Training alternates a trust-region update of the conductor with a
//! sequential, importance-weighted trust-region sweep over the agents, and
//! distills the conductor into per-agent local conductors so execution can
//! be fully decentralized.
//!
//! Modules:
//! - [`envlab`] — environments (tabular DEC-MDPs, matrix games, spread gridworld)
//! - [`approx`] — MLPs with exact gradients, flat parameters, checkpoints
//! - [`policy`] — conductor and agent heads, the joint mixture policy, KL tools
//! - [`estimate`] — returns, GAE, advantage split, the ratio accumulator, critic fitting
//! - [`trustregion`] — conjugate gradient, Fisher-vector products, line search
//! - [`hcpo`] — rollouts, two-level updates, distillation, the training loop
//! - [`oracle`] — exact evaluation and numerical certification of the theory

pub mod approx;
pub mod envlab;
mod error;
pub mod estimate;
pub mod hcpo;
pub mod oracle;
pub mod policy;
pub mod trustregion;

pub use error::{Error, Result};

pub use approx::{Activation, FlatParams, Mlp, MlpSpec};
pub use envlab::{Env, EnvStep, Environment, Observation, TabularDecMdp};
pub use estimate::{AdvantageBatch, TrajectoryBatch};
pub use hcpo::{IterationMetrics, TrainConfig, Variant};
pub use policy::{AgentPolicy, ConductorPolicy, JointMixturePolicy, LocalConductor, MixtureTable};
pub use trustregion::{TrustRegionConfig, TrustRegionStep};
