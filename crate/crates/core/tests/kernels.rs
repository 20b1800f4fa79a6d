mod common;

use common::*;
use hcpo_core::approx::Activation;
use hcpo_core::policy::{ActionDist, AgentAction, DistributionModel};
use hcpo_core::trustregion::{
    backtracking_search, conjugate_gradient, fisher_vector_product, max_step_size, trust_region_update, SurrogateProblem,
};
use hcpo_core::TrustRegionConfig;
use proptest::prelude::*;

#[test]
fn mlp_gradients_match_central_differences() {
    for seed in 0..5 {
        assert!(mlp_gradient_error(seed, Activation::Tanh) < 1e-4);
    }
}

#[test]
fn conductor_log_prob_gradient() {
    let c = smooth_conductor(1);
    let inputs = random_inputs(2, 5, 6);
    let actions = random_actions(3, 6, 4);
    assert!(log_prob_gradient_error(&c, &inputs, &actions) < 1e-4);
}

#[test]
fn categorical_agent_log_prob_and_kl_gradients() {
    let a = smooth_categorical_agent(4);
    let inputs = agent_inputs(&a, 5, 6);
    let actions = random_actions(6, 6, 3);
    assert!(log_prob_gradient_error(&a, &inputs, &actions) < 1e-4);
    let other = smooth_categorical_agent(7);
    let reference: Vec<ActionDist> = inputs.iter().map(|x| other.dist(x).unwrap()).collect();
    assert!(kl_gradient_error(&a, &inputs, &reference) < 1e-4);
}

#[test]
fn gaussian_agent_log_prob_and_kl_gradients() {
    let a = smooth_gaussian_agent(8);
    let inputs = agent_inputs(&a, 9, 6);
    let actions = random_continuous_actions(10, 6, 2);
    assert!(log_prob_gradient_error(&a, &inputs, &actions) < 1e-4);
    let other = smooth_gaussian_agent(11);
    let reference: Vec<ActionDist> = inputs.iter().map(|x| other.dist(x).unwrap()).collect();
    assert!(kl_gradient_error(&a, &inputs, &reference) < 1e-4);
}

#[test]
fn fvp_matches_kl_gradient_directional_derivative() {
    let c = smooth_conductor(12);
    let inputs = random_inputs(13, 5, 8);
    let v = normal_vec(&mut rng(14), c.num_params());
    assert!(fvp_directional_error(&c, &inputs, &v) < 1e-3);

    let a = smooth_categorical_agent(15);
    let inputs = agent_inputs(&a, 16, 8);
    let v = normal_vec(&mut rng(17), a.num_params());
    assert!(fvp_directional_error(&a, &inputs, &v) < 1e-3);

    let g = smooth_gaussian_agent(18);
    let inputs = agent_inputs(&g, 19, 8);
    let v = normal_vec(&mut rng(20), g.num_params());
    assert!(fvp_directional_error(&g, &inputs, &v) < 1e-3);
}

#[test]
fn fvp_is_linear_symmetric_and_psd() {
    let a = smooth_categorical_agent(21);
    let inputs = agent_inputs(&a, 22, 10);
    let w = vec![1.0; inputs.len()];
    let n = a.num_params();
    let mut r = rng(23);
    let (u, v) = (normal_vec(&mut r, n), normal_vec(&mut r, n));
    let fvp = |x: &[f64]| fisher_vector_product(&a, &inputs, &w, x, 0.0).unwrap();
    let (fu, fv) = (fvp(&u), fvp(&v));
    let combo: Vec<f64> = u.iter().zip(&v).map(|(x, y)| 2.0 * x - 3.0 * y).collect();
    let f_combo = fvp(&combo);
    for i in 0..n {
        assert!((f_combo[i] - (2.0 * fu[i] - 3.0 * fv[i])).abs() < 1e-10);
    }
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    assert!((dot(&u, &fv) - dot(&v, &fu)).abs() < 1e-9);
    for _ in 0..20 {
        let x = normal_vec(&mut r, n);
        assert!(dot(&x, &fvp(&x)) >= -1e-12);
    }
    // Damping adds exactly `damping * v`.
    let damped = fisher_vector_product(&a, &inputs, &w, &v, 0.1).unwrap();
    for i in 0..n {
        assert!((damped[i] - fv[i] - 0.1 * v[i]).abs() < 1e-12);
    }
}

#[test]
fn cg_agrees_with_dense_solve() {
    for (seed, dim) in [(0, 2), (1, 10), (2, 25), (3, 50)] {
        assert!(cg_dense_error(seed, dim) < 1e-8, "dim {dim}");
    }
}

#[test]
fn cg_stops_within_dimension_on_exact_arithmetic_scale() {
    let diag = [1.0, 2.0, 3.0, 4.0];
    let g = [1.0, 1.0, 1.0, 1.0];
    let sol = conjugate_gradient(|v| Ok(v.iter().zip(&diag).map(|(x, d)| x * d).collect()), &g, 50, 1e-12).unwrap();
    assert!(sol.iterations <= 4);
    for (x, d) in sol.x.iter().zip(&diag) {
        assert!((x - 1.0 / d).abs() < 1e-10);
    }
}

#[test]
fn accepted_update_respects_kl_and_improves_surrogate() {
    let a = smooth_categorical_agent(30);
    let inputs = agent_inputs(&a, 31, 64);
    let actions = random_actions(32, 64, 3);
    let mut r = rng(33);
    let coefficients = normal_vec(&mut r, 64);
    let weights = vec![1.0; 64];
    let problem = SurrogateProblem {
        inputs: &inputs,
        actions: &actions,
        coefficients: &coefficients,
        kl_weights: &weights,
    };
    let cfg = TrustRegionConfig::agent();
    let (new, step) = trust_region_update(&a, &problem, &cfg).unwrap();
    assert!(step.accepted);
    assert!(step.achieved_kl <= cfg.delta * (1.0 + 1e-6));
    let reference: Vec<ActionDist> = inputs.iter().map(|x| a.dist(x).unwrap()).collect();
    let kl = hcpo_core::trustregion::mean_kl(&new, &inputs, &reference, &weights).unwrap();
    assert!((kl - step.achieved_kl).abs() < 1e-12);
    let factor = cfg.backtrack_coef.powi(step.backtrack_exponent as i32);
    assert!(step.surrogate_gain >= cfg.accept_ratio * factor * step.expected_gain - 1e-15);
}

#[test]
fn zero_coefficients_skip_the_update() {
    let a = smooth_categorical_agent(34);
    let inputs = agent_inputs(&a, 35, 8);
    let actions = random_actions(36, 8, 3);
    let zeros = vec![0.0; 8];
    let ones = vec![1.0; 8];
    let problem = SurrogateProblem {
        inputs: &inputs,
        actions: &actions,
        coefficients: &zeros,
        kl_weights: &ones,
    };
    let (new, step) = trust_region_update(&a, &problem, &TrustRegionConfig::agent()).unwrap();
    assert!(!step.accepted && step.skipped.is_some());
    assert_eq!(new.flat(), a.flat());
}

#[test]
fn step_size_worked_example() {
    assert!((max_step_size(2.0, 0.01).unwrap() - 0.1).abs() < 1e-15);
    assert!(max_step_size(0.0, 0.01).is_none());
}

#[test]
fn backtracking_takes_smallest_feasible_exponent() {
    let cfg = TrustRegionConfig::default();
    // The KL at fraction f is 0.04 f^2, feasible from f <= 0.5.
    let search = backtracking_search(Ok, |f: &f64| Ok((*f, 0.04 * f * f)), 1.0, &cfg).unwrap();
    let j = search.exponent;
    assert!(search.accepted.is_some());
    assert!(0.8_f64.powi(j as i32) <= 0.5 + 1e-12);
    assert!(0.8_f64.powi(j as i32 - 1) > 0.5);
    // Nothing feasible: rejected after all exponents.
    let none = backtracking_search(Ok, |_: &f64| Ok((-1.0, 0.0)), 1.0, &cfg).unwrap();
    assert!(none.accepted.is_none());
}

proptest! {
    #[test]
    fn fisher_quadratic_form_is_nonnegative(seed in 0u64..1000) {
        let c = smooth_conductor(seed);
        let inputs = random_inputs(seed + 1, 5, 4);
        let w = vec![1.0; 4];
        let v = normal_vec(&mut rng(seed + 2), c.num_params());
        let fv = fisher_vector_product(&c, &inputs, &w, &v, 0.0).unwrap();
        let q: f64 = v.iter().zip(&fv).map(|(a, b)| a * b).sum();
        prop_assert!(q >= -1e-12);
    }

    #[test]
    fn log_probs_are_normalized(seed in 0u64..1000) {
        let a = smooth_categorical_agent(seed);
        let x = agent_inputs(&a, seed + 3, 1).remove(0);
        let d = a.dist(&x).unwrap();
        let total: f64 = (0..3).map(|k| d.log_prob(&AgentAction::Discrete(k)).unwrap().exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}
