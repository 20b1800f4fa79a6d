use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::kl::{kl_categorical, kl_diag_gaussian, log_softmax, softmax};
use crate::approx::{Activation, Mlp, MlpSpec};
use crate::{Error, Result};

/// Bounds applied to Gaussian log standard deviations.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// An action taken by one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AgentAction {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl AgentAction {
    pub fn discrete(&self) -> Option<usize> {
        match self {
            AgentAction::Discrete(a) => Some(*a),
            AgentAction::Continuous(_) => None,
        }
    }
}

/// A concrete output distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionDist {
    Categorical(Vec<f64>),
    Gaussian { mean: Vec<f64>, log_std: Vec<f64> },
}

impl ActionDist {
    pub fn log_prob(&self, action: &AgentAction) -> Result<f64> {
        match (self, action) {
            (ActionDist::Categorical(p), AgentAction::Discrete(a)) => {
                let pa = *p.get(*a).ok_or(Error::ActionOutOfRange {
                    agent: 0,
                    action: *a,
                    num_actions: p.len(),
                })?;
                Ok(pa.ln())
            }
            (ActionDist::Gaussian { mean, log_std }, AgentAction::Continuous(x)) => {
                if x.len() != mean.len() {
                    return Err(Error::Dimension {
                        context: "continuous action",
                        expected: mean.len(),
                        actual: x.len(),
                    });
                }
                let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
                Ok(x.iter()
                    .zip(mean)
                    .zip(log_std)
                    .map(|((x, m), s)| {
                        let z = (x - m) / s.exp();
                        -0.5 * z * z - s - half_ln_2pi
                    })
                    .sum())
            }
            _ => Err(Error::Unsupported("action kind does not match distribution kind".into())),
        }
    }

    pub fn kl(&self, other: &ActionDist) -> Result<f64> {
        match (self, other) {
            (ActionDist::Categorical(p), ActionDist::Categorical(q)) => kl_categorical(p, q),
            (ActionDist::Gaussian { mean: mp, log_std: sp }, ActionDist::Gaussian { mean: mq, log_std: sq }) => {
                kl_diag_gaussian(mp, sp, mq, sq)
            }
            _ => Err(Error::Unsupported("KL between different distribution kinds".into())),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AgentAction {
        match self {
            ActionDist::Categorical(p) => AgentAction::Discrete(sample_categorical(p, rng)),
            ActionDist::Gaussian { mean, log_std } => AgentAction::Continuous(
                mean.iter()
                    .zip(log_std)
                    .map(|(m, s)| m + s.exp() * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            ),
        }
    }

    /// Most likely action (lowest index on ties).
    pub fn mode(&self) -> AgentAction {
        match self {
            ActionDist::Categorical(p) => AgentAction::Discrete(argmax(p)),
            ActionDist::Gaussian { mean, .. } => AgentAction::Continuous(mean.clone()),
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            ActionDist::Categorical(p) => -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>(),
            ActionDist::Gaussian { log_std, .. } => log_std
                .iter()
                .map(|s| s + 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln()))
                .sum(),
        }
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

/// A conditional distribution family with flat parameters.
///
/// Inputs are the full network input; gradients are accumulated into `out`
/// scaled by `scale`, so callers can form weighted batch averages without
/// temporary vectors.
pub trait DistributionModel: Clone + Send + Sync {
    fn num_params(&self) -> usize;
    fn flat(&self) -> Vec<f64>;
    fn set_flat(&mut self, values: &[f64]) -> Result<()>;
    fn input_dim(&self) -> usize;
    fn dist(&self, input: &[f64]) -> Result<ActionDist>;
    /// Adds `scale * grad log p(action | input)`.
    fn grad_log_prob_into(&self, input: &[f64], action: &AgentAction, scale: f64, out: &mut [f64]) -> Result<()>;
    /// Adds `scale * grad_params KL(reference || p(. | input))`.
    fn grad_kl_into(&self, input: &[f64], reference: &ActionDist, scale: f64, out: &mut [f64]) -> Result<()>;
    /// Adds `scale * F(input) v`, the Fisher information of the output
    /// distribution pulled back to parameter space.
    fn fvp_into(&self, input: &[f64], v: &[f64], scale: f64, out: &mut [f64]) -> Result<()>;

    fn with_flat(&self, values: &[f64]) -> Result<Self> {
        let mut m = self.clone();
        m.set_flat(values)?;
        Ok(m)
    }
}

/// Softmax distribution over `K` instructions; used both for the centralized
/// conductor (input: state features) and for local conductors (input: one
/// agent's observation).
#[derive(Debug, Clone, PartialEq)]
pub struct ConductorPolicy {
    net: Mlp,
}

/// Per-agent conductor distilled from the centralized one.
pub type LocalConductor = ConductorPolicy;

impl ConductorPolicy {
    pub fn new(net: Mlp) -> Self {
        ConductorPolicy { net }
    }

    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        k: usize,
        activation: Activation,
        output_gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidModel("conductor needs K >= 1".into()));
        }
        let spec = MlpSpec::new(input_dim, hidden.to_vec(), k, activation)?;
        Ok(ConductorPolicy {
            net: Mlp::init(spec, output_gain, rng)?,
        })
    }

    pub fn k(&self) -> usize {
        self.net.spec().output_dim
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn probs(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.net.forward(input)?))
    }

    pub fn log_probs(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.net.forward(input)?))
    }

    /// Gradient of the cross-entropy `-sum_j target_j ln w(j | input)`, accumulated.
    pub fn grad_cross_entropy_into(&self, input: &[f64], target: &[f64], scale: f64, out: &mut [f64]) -> Result<f64> {
        let trace = self.net.trace(input)?;
        let p = softmax(trace.output());
        let lp = log_softmax(trace.output());
        let mass: f64 = target.iter().sum();
        let loss = -target.iter().zip(&lp).map(|(t, l)| t * l).sum::<f64>();
        let g: Vec<f64> = p.iter().zip(target).map(|(pi, ti)| mass * pi - ti).collect();
        self.net.backward_into(&trace, &g, scale, out)?;
        Ok(loss)
    }
}

impl DistributionModel for ConductorPolicy {
    fn num_params(&self) -> usize {
        self.net.num_params()
    }
    fn flat(&self) -> Vec<f64> {
        self.net.gather()
    }
    fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        self.net.scatter(values)
    }
    fn input_dim(&self) -> usize {
        self.net.spec().input_dim
    }
    fn dist(&self, input: &[f64]) -> Result<ActionDist> {
        Ok(ActionDist::Categorical(self.probs(input)?))
    }
    fn grad_log_prob_into(&self, input: &[f64], action: &AgentAction, scale: f64, out: &mut [f64]) -> Result<()> {
        categorical_grad_log_prob(&self.net, input, action, scale, out)
    }
    fn grad_kl_into(&self, input: &[f64], reference: &ActionDist, scale: f64, out: &mut [f64]) -> Result<()> {
        categorical_grad_kl(&self.net, input, reference, scale, out)
    }
    fn fvp_into(&self, input: &[f64], v: &[f64], scale: f64, out: &mut [f64]) -> Result<()> {
        categorical_fvp(&self.net, input, v, scale, out)
    }
}

fn categorical_grad_log_prob(net: &Mlp, input: &[f64], action: &AgentAction, scale: f64, out: &mut [f64]) -> Result<()> {
    let a = action
        .discrete()
        .ok_or_else(|| Error::Unsupported("continuous action for a categorical head".into()))?;
    let trace = net.trace(input)?;
    let mut g: Vec<f64> = softmax(trace.output()).into_iter().map(|p| -p).collect();
    if a >= g.len() {
        return Err(Error::ActionOutOfRange {
            agent: 0,
            action: a,
            num_actions: g.len(),
        });
    }
    g[a] += 1.0;
    net.backward_into(&trace, &g, scale, out)
}

fn categorical_grad_kl(net: &Mlp, input: &[f64], reference: &ActionDist, scale: f64, out: &mut [f64]) -> Result<()> {
    let ActionDist::Categorical(q) = reference else {
        return Err(Error::Unsupported("gaussian reference for a categorical head".into()));
    };
    let trace = net.trace(input)?;
    let p = softmax(trace.output());
    if p.len() != q.len() {
        return Err(Error::Dimension {
            context: "reference distribution",
            expected: p.len(),
            actual: q.len(),
        });
    }
    // d/dz KL(q || softmax(z)) = softmax(z) * sum(q) - q
    let mass: f64 = q.iter().sum();
    let g: Vec<f64> = p.iter().zip(q).map(|(pi, qi)| pi * mass - qi).collect();
    net.backward_into(&trace, &g, scale, out)
}

fn categorical_fvp(net: &Mlp, input: &[f64], v: &[f64], scale: f64, out: &mut [f64]) -> Result<()> {
    let trace = net.trace(input)?;
    let p = softmax(trace.output());
    let dz = net.jvp(&trace, v)?;
    // (diag(p) - p p^T) dz
    let pdz: f64 = p.iter().zip(&dz).map(|(a, b)| a * b).sum();
    let u: Vec<f64> = p.iter().zip(&dz).map(|(pi, d)| pi * (d - pdz)).collect();
    net.backward_into(&trace, &u, scale, out)
}

/// Output head of an agent policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentHead {
    Categorical { actions: usize },
    Gaussian { dim: usize },
}

/// Agent policy `pi^i(a | o^i, M)`; the instruction enters as a one-hot
/// vector appended to the observation.
///
/// Flat parameters are the network weights followed, for Gaussian heads, by
/// the state-independent log standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPolicy {
    net: Mlp,
    head: AgentHead,
    k: usize,
    log_std: Vec<f64>,
}

impl AgentPolicy {
    pub fn new(net: Mlp, head: AgentHead, k: usize, log_std: Vec<f64>) -> Result<Self> {
        let out = match head {
            AgentHead::Categorical { actions } => actions,
            AgentHead::Gaussian { dim } => dim,
        };
        if net.spec().output_dim != out || net.spec().input_dim <= k || k == 0 {
            return Err(Error::InvalidModel(format!(
                "agent network {:?} does not fit head {head:?} with K={k}",
                net.spec()
            )));
        }
        let want_std = matches!(head, AgentHead::Gaussian { .. }).then_some(out).unwrap_or(0);
        if log_std.len() != want_std {
            return Err(Error::Dimension {
                context: "agent log-std",
                expected: want_std,
                actual: log_std.len(),
            });
        }
        Ok(AgentPolicy { net, head, k, log_std })
    }

    /// `initial_std` applies to Gaussian heads only.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        head: AgentHead,
        k: usize,
        activation: Activation,
        output_gain: f64,
        initial_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let out = match head {
            AgentHead::Categorical { actions } => actions,
            AgentHead::Gaussian { dim } => dim,
        };
        let spec = MlpSpec::new(obs_dim + k, hidden.to_vec(), out, activation)?;
        let net = Mlp::init(spec, output_gain, rng)?;
        let log_std = match head {
            AgentHead::Categorical { .. } => Vec::new(),
            AgentHead::Gaussian { dim } => vec![initial_std.ln().clamp(LOG_STD_MIN, LOG_STD_MAX); dim],
        };
        AgentPolicy::new(net, head, k, log_std)
    }

    pub fn head(&self) -> AgentHead {
        self.head
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn obs_dim(&self) -> usize {
        self.net.spec().input_dim - self.k
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    /// Observation with the one-hot instruction appended.
    pub fn input(&self, observation: &[f64], instruction: usize) -> Result<Vec<f64>> {
        if instruction >= self.k {
            return Err(Error::Dimension {
                context: "instruction index",
                expected: self.k,
                actual: instruction,
            });
        }
        let mut x = Vec::with_capacity(observation.len() + self.k);
        x.extend_from_slice(observation);
        x.extend((0..self.k).map(|j| if j == instruction { 1.0 } else { 0.0 }));
        Ok(x)
    }

    pub fn dist_for(&self, observation: &[f64], instruction: usize) -> Result<ActionDist> {
        self.dist(&self.input(observation, instruction)?)
    }

    fn clamped_log_std(&self) -> Vec<f64> {
        self.log_std.iter().map(|s| s.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect()
    }
}

impl DistributionModel for AgentPolicy {
    fn num_params(&self) -> usize {
        self.net.num_params() + self.log_std.len()
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = self.net.gather();
        v.extend_from_slice(&self.log_std);
        v
    }

    fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Dimension {
                context: "agent parameters",
                expected: self.num_params(),
                actual: values.len(),
            });
        }
        let n = self.net.num_params();
        self.net.scatter(&values[..n])?;
        self.log_std.copy_from_slice(&values[n..]);
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.net.spec().input_dim
    }

    fn dist(&self, input: &[f64]) -> Result<ActionDist> {
        let out = self.net.forward(input)?;
        Ok(match self.head {
            AgentHead::Categorical { .. } => ActionDist::Categorical(softmax(&out)),
            AgentHead::Gaussian { .. } => ActionDist::Gaussian {
                mean: out,
                log_std: self.clamped_log_std(),
            },
        })
    }

    fn grad_log_prob_into(&self, input: &[f64], action: &AgentAction, scale: f64, out: &mut [f64]) -> Result<()> {
        let n = self.net.num_params();
        match self.head {
            AgentHead::Categorical { .. } => categorical_grad_log_prob(&self.net, input, action, scale, &mut out[..n]),
            AgentHead::Gaussian { .. } => {
                let AgentAction::Continuous(x) = action else {
                    return Err(Error::Unsupported("discrete action for a gaussian head".into()));
                };
                let trace = self.net.trace(input)?;
                let mean = trace.output();
                let s = self.clamped_log_std();
                let mut gm = Vec::with_capacity(mean.len());
                for d in 0..mean.len() {
                    let var = (2.0 * s[d]).exp();
                    let diff = x[d] - mean[d];
                    gm.push(diff / var);
                    if self.log_std[d] == s[d] {
                        out[n + d] += scale * (diff * diff / var - 1.0);
                    }
                }
                self.net.backward_into(&trace, &gm, scale, &mut out[..n])
            }
        }
    }

    fn grad_kl_into(&self, input: &[f64], reference: &ActionDist, scale: f64, out: &mut [f64]) -> Result<()> {
        let n = self.net.num_params();
        match (self.head, reference) {
            (AgentHead::Categorical { .. }, _) => categorical_grad_kl(&self.net, input, reference, scale, &mut out[..n]),
            (AgentHead::Gaussian { .. }, ActionDist::Gaussian { mean: mo, log_std: so }) => {
                let trace = self.net.trace(input)?;
                let mean = trace.output();
                let s = self.clamped_log_std();
                let mut gm = Vec::with_capacity(mean.len());
                for d in 0..mean.len() {
                    let var = (2.0 * s[d]).exp();
                    let diff = mean[d] - mo[d];
                    gm.push(diff / var);
                    if self.log_std[d] == s[d] {
                        let var_o = (2.0 * so[d]).exp();
                        out[n + d] += scale * (1.0 - (var_o + diff * diff) / var);
                    }
                }
                self.net.backward_into(&trace, &gm, scale, &mut out[..n])
            }
            _ => Err(Error::Unsupported("categorical reference for a gaussian head".into())),
        }
    }

    fn fvp_into(&self, input: &[f64], v: &[f64], scale: f64, out: &mut [f64]) -> Result<()> {
        let n = self.net.num_params();
        if v.len() != self.num_params() {
            return Err(Error::Dimension {
                context: "fisher-vector product",
                expected: self.num_params(),
                actual: v.len(),
            });
        }
        match self.head {
            AgentHead::Categorical { .. } => categorical_fvp(&self.net, input, &v[..n], scale, &mut out[..n]),
            AgentHead::Gaussian { .. } => {
                let trace = self.net.trace(input)?;
                let dmean = self.net.jvp(&trace, &v[..n])?;
                let s = self.clamped_log_std();
                let u: Vec<f64> = dmean.iter().zip(&s).map(|(d, s)| d / (2.0 * s).exp()).collect();
                for d in 0..s.len() {
                    if self.log_std[d] == s[d] {
                        out[n + d] += scale * 2.0 * v[n + d];
                    }
                }
                self.net.backward_into(&trace, &u, scale, &mut out[..n])
            }
        }
    }
}
