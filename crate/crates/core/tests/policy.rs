mod common;

use common::rng;
use hcpo_core::approx::{read_checkpoint, write_checkpoint, Activation};
use hcpo_core::envlab::{decode_joint, random_tabular};
use hcpo_core::policy::{
    mixture_kl_bound, per_agent_kl_sum, AgentHead, AgentPolicy, ConductorKind, ConductorPolicy, ExecutionMode,
    JointMixturePolicy, MixtureTable, StateMixture, StateView,
};
use proptest::prelude::*;

fn small_policy(seed: u64, k: usize, local: bool) -> JointMixturePolicy {
    let mut r = rng(seed);
    let conductor = ConductorPolicy::init(3, &[8], k, Activation::Tanh, 1.0, &mut r).unwrap();
    let agents = [2, 3]
        .iter()
        .map(|&a| AgentPolicy::init(3, &[8], AgentHead::Categorical { actions: a }, k, Activation::Tanh, 1.0, 1.0, &mut r).unwrap())
        .collect();
    let locals = local.then(|| {
        (0..2)
            .map(|_| ConductorPolicy::init(3, &[8], k, Activation::Tanh, 1.0, &mut r).unwrap())
            .collect()
    });
    JointMixturePolicy::new(conductor, ConductorKind::Learned, agents, locals).unwrap()
}

fn view() -> StateView {
    StateView {
        state_features: vec![0.3, -1.2, 0.5],
        observations: vec![vec![0.3, -1.2, 0.5], vec![1.0, 0.0, -0.4]],
    }
}

#[test]
fn mixture_sums_to_one() {
    let p = small_policy(1, 3, false);
    let mix = p.state_mixture(&view()).unwrap();
    let total: f64 = mix.joint_distribution().unwrap().iter().map(|(_, q)| q).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn sampling_frequencies_match_mixture() {
    let p = small_policy(2, 3, false);
    let v = view();
    let mix = p.state_mixture(&v).unwrap();
    let mut counts = [0usize; 6];
    let mut r = rng(3);
    let draws = 200_000;
    for _ in 0..draws {
        let s = p.sample_joint(&v, &mut r, ExecutionMode::Centralized).unwrap();
        let a: Vec<usize> = s.actions.iter().map(|a| a.discrete().unwrap()).collect();
        counts[a[0] * 3 + a[1]] += 1;
    }
    for (idx, &c) in counts.iter().enumerate() {
        let expected = mix.mixture_prob(&decode_joint(&[2, 3], idx));
        let freq = c as f64 / draws as f64;
        // Five standard errors of a Bernoulli frequency.
        let se = (expected * (1.0 - expected) / draws as f64).sqrt();
        assert!((freq - expected).abs() < 5.0 * se + 1e-4, "joint {idx}: {freq} vs {expected}");
    }
}

#[test]
fn single_instruction_mixture_is_a_product() {
    let mix = StateMixture {
        w: vec![1.0],
        cond: vec![vec![vec![0.2, 0.8], vec![0.5, 0.25, 0.25]]],
    };
    assert!((mix.mixture_prob(&[1, 0]) - 0.4).abs() < 1e-15);
    assert!((mix.mixture_prob(&[0, 2]) - 0.05).abs() < 1e-15);
}

#[test]
fn two_instruction_worked_example() {
    // w = (0.3, 0.7); under M^1 both agents pick 0 surely, under M^2 both pick 1.
    let mix = StateMixture {
        w: vec![0.3, 0.7],
        cond: vec![
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        ],
    };
    assert!((mix.mixture_prob(&[0, 0]) - 0.3).abs() < 1e-15);
    assert!((mix.mixture_prob(&[1, 1]) - 0.7).abs() < 1e-15);
    assert_eq!(mix.mixture_prob(&[0, 1]), 0.0);
    assert_eq!(mix.mixture_prob(&[1, 0]), 0.0);
}

#[test]
fn mixture_kl_decomposition_on_random_pairs() {
    let mut r = rng(4);
    let mut pairs = 0;
    for scale in [0.3, 1.0, 3.0] {
        for _ in 0..400 {
            let old = MixtureTable::random(&mut r, 1, 3, &[2, 3, 2], scale).unwrap();
            let new = old.perturbed(&mut r, 0.5);
            let b = mixture_kl_bound(old.at(0), new.at(0)).unwrap();
            assert!(b.lhs <= b.rhs + 1e-12, "{b:?}");
            assert!(b.lhs >= -1e-15);
            pairs += 1;
        }
    }
    assert!(pairs >= 1000);
}

#[test]
fn joint_kl_is_sum_of_per_agent_kls() {
    let mut r = rng(5);
    for _ in 0..100 {
        let old = MixtureTable::random(&mut r, 1, 2, &[3, 2], 1.0).unwrap();
        let new = old.perturbed(&mut r, 1.0);
        for j in 0..2 {
            let joint = old.at(0).conditional_joint_kl(new.at(0), j).unwrap();
            let sum = per_agent_kl_sum(old.at(0), new.at(0), j).unwrap();
            assert!((joint - sum).abs() < 1e-12);
        }
    }
}

#[test]
fn decentralized_sampling_uses_local_conductors() {
    let p = small_policy(6, 3, true);
    let v = view();
    let mut r = rng(7);
    let s = p.sample_joint(&v, &mut r, ExecutionMode::Decentralized).unwrap();
    let expected: f64 = (0..2)
        .map(|i| p.local_probs(i, &v.observations[i]).unwrap()[s.instructions[i]].ln())
        .sum();
    assert!((s.conductor_log_prob - expected).abs() < 1e-12);
    let no_local = small_policy(6, 3, false);
    assert!(no_local.sample_joint(&v, &mut r, ExecutionMode::Decentralized).is_err());
}

#[test]
fn uniform_conductor_ignores_parameters() {
    let mut p = small_policy(8, 4, false);
    p.conductor_kind = ConductorKind::Uniform;
    assert_eq!(p.conductor_probs(&[9.0, 9.0, 9.0]).unwrap(), vec![0.25; 4]);
}

#[test]
fn checkpoint_round_trip_preserves_probabilities() {
    let p = small_policy(9, 3, true);
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &p.to_checkpoint()).unwrap();
    let back = JointMixturePolicy::from_checkpoint(&read_checkpoint(bytes.as_slice()).unwrap()).unwrap();
    assert_eq!(back, p);
    let v = view();
    assert_eq!(p.state_mixture(&v).unwrap(), back.state_mixture(&v).unwrap());
}

#[test]
fn table_from_policy_matches_one_hot_views() {
    let mdp = random_tabular(10, 2, 3, &[2, 3], 0.9).unwrap();
    let p = small_policy(11, 2, false);
    let table = MixtureTable::from_policy(&p, &mdp).unwrap();
    for s in 0..3 {
        let mut one_hot = vec![0.0; 3];
        one_hot[s] = 1.0;
        let v = StateView {
            state_features: one_hot.clone(),
            observations: vec![one_hot.clone(), one_hot],
        };
        assert_eq!(table.at(s), &p.state_mixture(&v).unwrap());
    }
}

proptest! {
    #[test]
    fn random_tables_are_normalized(seed in 0u64..500, k in 1usize..4) {
        let t = MixtureTable::random(&mut rng(seed), 2, k, &[3, 2, 2], 2.0).unwrap();
        for s in 0..2 {
            let total: f64 = t.at(s).joint_distribution().unwrap().iter().map(|(_, p)| p).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
