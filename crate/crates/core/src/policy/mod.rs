//! Conductor and agent policy heads, the joint mixture policy, KL tools.
//!
//! Agents condition on their observation with the instruction appended as a
//! one-hot vector. The joint policy is the instruction-marginalized mixture
//! `pi_mar(a | s) = sum_j w(M^j | s) prod_i pi^i(a^i | o^i, M^j)`.

mod heads;
mod kl;
mod mixture;
mod table;

pub use heads::{
    ActionDist, AgentAction, AgentHead, AgentPolicy, ConductorPolicy, DistributionModel, LocalConductor, LOG_STD_MAX,
    LOG_STD_MIN,
};
pub use kl::{kl_categorical, kl_diag_gaussian, log_softmax, softmax};
pub use mixture::{
    mixture_kl_bound, per_agent_kl_sum, ActOptions, ConductorKind, ExecutionMode, JointMixturePolicy, JointSample,
    MixtureKlBound, StateMixture, StateView,
};
pub use table::MixtureTable;

