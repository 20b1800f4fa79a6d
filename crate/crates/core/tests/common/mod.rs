//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use hcpo_core::approx::{Activation, Mlp, MlpSpec};
use hcpo_core::policy::{ActionDist, AgentAction, AgentHead, AgentPolicy, ConductorPolicy, DistributionModel};
use hcpo_core::trustregion::{conjugate_gradient, fisher_vector_product};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Central differences of a scalar function.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest entrywise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `||a - b|| / max(||a||, ||b||)`.
pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na.max(nb) == 0.0 {
        0.0
    } else {
        diff / na.max(nb)
    }
}

/// Smooth (tanh) models of every family, with random parameters of moderate scale.
pub fn smooth_conductor(seed: u64) -> ConductorPolicy {
    let mut r = rng(seed);
    ConductorPolicy::init(5, &[8, 6], 4, Activation::Tanh, 1.0, &mut r).unwrap()
}

pub fn smooth_categorical_agent(seed: u64) -> AgentPolicy {
    let mut r = rng(seed);
    AgentPolicy::init(4, &[8], AgentHead::Categorical { actions: 3 }, 3, Activation::Tanh, 1.0, 1.0, &mut r).unwrap()
}

pub fn smooth_gaussian_agent(seed: u64) -> AgentPolicy {
    let mut r = rng(seed);
    AgentPolicy::init(4, &[8], AgentHead::Gaussian { dim: 2 }, 3, Activation::Tanh, 1.0, 0.7, &mut r).unwrap()
}

pub fn random_inputs(seed: u64, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..count).map(|_| normal_vec(&mut r, dim)).collect()
}

/// Worst relative error of analytic log-prob gradients against central differences.
pub fn log_prob_gradient_error<M: DistributionModel>(model: &M, inputs: &[Vec<f64>], actions: &[AgentAction]) -> f64 {
    let theta = model.flat();
    let mut worst = 0.0_f64;
    for (x, a) in inputs.iter().zip(actions) {
        let mut analytic = vec![0.0; theta.len()];
        model.grad_log_prob_into(x, a, 1.0, &mut analytic).unwrap();
        let fd = central_diff(
            |p| model.with_flat(p).unwrap().dist(x).unwrap().log_prob(a).unwrap(),
            &theta,
            1e-6,
        );
        worst = worst.max(max_rel_err(&analytic, &fd, 1e-4));
    }
    worst
}

/// Worst relative error of the analytic KL gradient against central differences.
pub fn kl_gradient_error<M: DistributionModel>(model: &M, inputs: &[Vec<f64>], reference: &[ActionDist]) -> f64 {
    let theta = model.flat();
    let mut worst = 0.0_f64;
    for (x, r) in inputs.iter().zip(reference) {
        let mut analytic = vec![0.0; theta.len()];
        model.grad_kl_into(x, r, 1.0, &mut analytic).unwrap();
        let fd = central_diff(|p| r.kl(&model.with_flat(p).unwrap().dist(x).unwrap()).unwrap(), &theta, 1e-6);
        worst = worst.max(max_rel_err(&analytic, &fd, 1e-4));
    }
    worst
}

/// Relative error between `F v` and the directional derivative of the
/// analytic KL gradient, `(g(theta + h v) - g(theta - h v)) / 2h`, where `g`
/// is the gradient of `mean_b KL(p_theta0 || p_theta)` (whose Hessian at
/// `theta0` is the Fisher matrix).
pub fn fvp_directional_error<M: DistributionModel>(model: &M, inputs: &[Vec<f64>], v: &[f64]) -> f64 {
    let weights = vec![1.0; inputs.len()];
    let fv = fisher_vector_product(model, inputs, &weights, v, 0.0).unwrap();
    let reference: Vec<ActionDist> = inputs.iter().map(|x| model.dist(x).unwrap()).collect();
    let theta = model.flat();
    let kl_grad = |scale: f64| {
        let p: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + scale * d).collect();
        let m = model.with_flat(&p).unwrap();
        let mut g = vec![0.0; theta.len()];
        for (x, r) in inputs.iter().zip(&reference) {
            m.grad_kl_into(x, r, 1.0 / inputs.len() as f64, &mut g).unwrap();
        }
        g
    };
    let h = 1e-5;
    let (up, down) = (kl_grad(h), kl_grad(-h));
    let fd: Vec<f64> = up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    vec_rel_err(&fv, &fd)
}

/// Error of CG against a dense LU solve on a random SPD system.
pub fn cg_dense_error(seed: u64, dim: usize) -> f64 {
    let mut r = rng(seed);
    let b = DMatrix::from_fn(dim, dim, |_, _| r.sample::<f64, _>(StandardNormal));
    let a = b.transpose() * &b + DMatrix::identity(dim, dim) * (dim as f64);
    let g = DVector::from_vec(normal_vec(&mut r, dim));
    let dense = a.clone().lu().solve(&g).unwrap();
    let cg = conjugate_gradient(
        |v| Ok((&a * DVector::from_column_slice(v)).iter().copied().collect()),
        g.as_slice(),
        10 * dim,
        1e-14,
    )
    .unwrap();
    cg.x.iter().zip(dense.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random discrete actions for each input.
pub fn random_actions(seed: u64, count: usize, actions: usize) -> Vec<AgentAction> {
    let mut r = rng(seed);
    (0..count).map(|_| AgentAction::Discrete(r.random_range(0..actions))).collect()
}

pub fn random_continuous_actions(seed: u64, count: usize, dim: usize) -> Vec<AgentAction> {
    let mut r = rng(seed);
    (0..count).map(|_| AgentAction::Continuous(normal_vec(&mut r, dim))).collect()
}

/// Network input of an agent: observation with the one-hot instruction appended.
pub fn agent_inputs(agent: &AgentPolicy, seed: u64, count: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let obs = normal_vec(&mut r, agent.obs_dim());
            agent.input(&obs, r.random_range(0..agent.k())).unwrap()
        })
        .collect()
}

/// Scalar-loss gradient check of a bare network.
pub fn mlp_gradient_error(seed: u64, activation: Activation) -> f64 {
    let mut r = rng(seed);
    let net = Mlp::init(MlpSpec::new(4, vec![7, 5], 3, activation).unwrap(), 1.0, &mut r).unwrap();
    let x = normal_vec(&mut r, 4);
    let y = normal_vec(&mut r, 3);
    let loss = |out: &[f64]| -> (f64, Vec<f64>) {
        let d: Vec<f64> = out.iter().zip(&y).map(|(o, t)| o - t).collect();
        (0.5 * d.iter().map(|v| v * v).sum::<f64>(), d)
    };
    let (_, grad) = net.grad_scalar(&x, loss).unwrap();
    let theta = net.gather();
    let fd = central_diff(|p| loss(&net.with_params(p).unwrap().forward(&x).unwrap()).0, &theta, 1e-6);
    max_rel_err(grad.values(), &fd, 1e-4)
}
