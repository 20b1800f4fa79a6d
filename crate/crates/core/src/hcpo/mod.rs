//! The training loop: rollouts, the conductor step, the sequential agent
//! sweep with its ratio accumulator, local-conductor distillation and
//! critic fitting, plus the ablation variants.

mod config;
mod metrics;
mod rollout;
mod train;
mod update;

pub use config::{AgentKlWeight, TrainConfig, Variant};
pub use metrics::{iqr, median, quantile, IterationMetrics, MetricsWriter, UpdateSummary, METRICS_COLUMNS, METRICS_SCHEMA};
pub use rollout::{collect_rollouts, episode_rng, evaluate, RolloutSpec};
pub use train::{train, ProbeEvent, TrainOutcome, Trainer};
pub use update::{
    agent_inputs, cross_entropy, distill_local_conductor, update_agent, update_conductor, AgentUpdate, DistillReport,
    UpdateOrder,
};
