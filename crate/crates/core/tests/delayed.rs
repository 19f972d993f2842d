use dtcorl_core::delayed::{
    augment_trajectory, belief_samples, build_augmented_mdp, delayed_reward, delayed_transition,
    exact_belief, lift_policy, push_forward, recover_trajectory, simulate_return, AugmentedState,
    TabularAugmented, Transition,
};
use dtcorl_core::mdp::{
    exact_policy_evaluation, exact_policy_iteration, random_deterministic_mdp, random_mdp,
    two_state_chain, TabularMdp, TabularPolicy, DEFAULT_TOL,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stochastic_chain() -> TabularMdp {
    // a0 is the identity, a1 flips with probability 0.8
    two_state_chain(0.8, 0.9).unwrap()
}

#[test]
fn belief_matches_monte_carlo_filter() {
    let mdp = stochastic_chain();
    let x = AugmentedState::new(0, vec![1, 1]);
    let b = exact_belief(&mdp, &x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 1_000_000;
    let mut hits = 0usize;
    for _ in 0..n {
        let mut s = x.base;
        for &a in &x.window {
            s = mdp.sample_next(s, a, &mut rng);
        }
        hits += (s == 1) as usize;
    }
    let p_hat = hits as f64 / n as f64;
    let se = (b.probs()[1] * (1.0 - b.probs()[1]) / n as f64).sqrt();
    assert!((b.probs()[1] - 0.32).abs() < 1e-15);
    assert!((p_hat - b.probs()[1]).abs() <= 3.0 * se, "mc {p_hat} exact {}", b.probs()[1]);
}

#[test]
fn one_step_delayed_reward() {
    let mdp = stochastic_chain();
    let r = delayed_reward(&mdp, &AugmentedState::new(0, vec![1]), 0).unwrap();
    assert!((r - 0.8).abs() < 1e-15);
    let r0 = delayed_reward(&mdp, &AugmentedState::plain(1), 1).unwrap();
    assert_eq!(r0, mdp.reward(1, 1));
}

#[test]
fn delayed_transition_reads_the_kernel() {
    let mdp = stochastic_chain();
    let x = AugmentedState::new(0, vec![1]);
    let succ = delayed_transition(&mdp, &x, 0).unwrap();
    let mut got: Vec<(TabularAugmented, f64)> = succ;
    got.sort_by_key(|(x, _)| x.base);
    assert_eq!(got[0].0, AugmentedState::new(0, vec![0]));
    assert_eq!(got[1].0, AugmentedState::new(1, vec![0]));
    assert!((got[0].1 - 0.2).abs() < 1e-15 && (got[1].1 - 0.8).abs() < 1e-15);
    let aug = build_augmented_mdp(&mdp, 1, 0).unwrap();
    for (x_next, p) in got {
        assert_eq!(aug.prob(x.index(2), 0, x_next.index(2)), p);
    }
    let plain = delayed_transition(&mdp, &AugmentedState::plain(0), 1).unwrap();
    assert_eq!(plain.len(), 2);
    assert!(plain.iter().all(|(x, _)| x.window.is_empty()));
}

#[test]
fn zero_delay_augmentation_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mdp = random_mdp(3, 2, 0.9, &mut rng).unwrap();
    assert_eq!(build_augmented_mdp(&mdp, 0, 0).unwrap(), mdp);
}

#[test]
fn delay_never_increases_optimal_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let mdp = random_mdp(2, 2, 0.9, &mut rng).unwrap();
        let aug = build_augmented_mdp(&mdp, 2, 0).unwrap();
        assert_eq!(aug.n_states(), 8);
        let (_, free) = exact_policy_iteration(&mdp, DEFAULT_TOL).unwrap();
        let (_, delayed) = exact_policy_iteration(&aug, DEFAULT_TOL).unwrap();
        for idx in 0..8 {
            let x = TabularAugmented::from_index(idx, 2, 2);
            let b = exact_belief(&mdp, &x).unwrap();
            assert!(delayed.v[idx] <= b.expect(|s| free.v[s]) + 1e-9);
        }
        let rho_true = push_forward(&mdp, &push_forward(&mdp, mdp.rho0(), 0), 0);
        assert!(delayed.expected_value(aug.rho0()) <= free.expected_value(&rho_true) + 1e-9);
    }
}

#[test]
fn deterministic_delay_loses_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let mdp = random_deterministic_mdp(4, 2, 0.9, &mut rng).unwrap();
        let aug = build_augmented_mdp(&mdp, 1, 0).unwrap();
        let (_, free) = exact_policy_iteration(&mdp, DEFAULT_TOL).unwrap();
        let (_, delayed) = exact_policy_iteration(&aug, DEFAULT_TOL).unwrap();
        for idx in 0..aug.n_states() {
            let x = TabularAugmented::from_index(idx, 2, 1);
            let b = exact_belief(&mdp, &x).unwrap();
            assert!(b.is_point_mass());
            let s_t = b.support().next().unwrap().0;
            assert!((delayed.v[idx] - free.v[s_t]).abs() < 1e-8);
            for a in 0..2 {
                assert_eq!(delayed_reward(&mdp, &x, a).unwrap(), mdp.reward(s_t, a));
            }
        }
    }
}

#[test]
fn belief_equals_matrix_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mdp = random_mdp(5, 3, 0.9, &mut rng).unwrap();
    let kernels: Vec<DMatrix<f64>> = (0..3)
        .map(|a| DMatrix::from_fn(5, 5, |i, j| mdp.prob(i, a, j)))
        .collect();
    for _ in 0..200 {
        let delay = rng.random_range(0..6);
        let x = AugmentedState::new(
            rng.random_range(0..5),
            (0..delay).map(|_| rng.random_range(0..3)).collect(),
        );
        let b = exact_belief(&mdp, &x).unwrap();
        let mut m = DMatrix::<f64>::identity(5, 5);
        for &a in &x.window {
            m *= &kernels[a];
        }
        let row = m.row(x.base);
        let sum: f64 = b.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for s in 0..5 {
            assert!(b.probs()[s] >= 0.0);
            assert!((b.probs()[s] - row[s]).abs() < 1e-12);
        }
    }
}

#[test]
fn filtering_is_consistent_with_augmented_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mdp = random_mdp(4, 3, 0.9, &mut rng).unwrap();
    for delay in 1..=3 {
        for _ in 0..30 {
            let x = AugmentedState::new(
                rng.random_range(0..4),
                (0..delay).map(|_| rng.random_range(0..3)).collect(),
            );
            let a = rng.random_range(0..3);
            let mut mixed = DVector::<f64>::zeros(4);
            for (x_next, p) in delayed_transition(&mdp, &x, a).unwrap() {
                let b = exact_belief(&mdp, &x_next).unwrap();
                mixed += DVector::from_column_slice(b.probs()) * p;
            }
            let direct = push_forward(&mdp, exact_belief(&mdp, &x).unwrap().probs(), a);
            for s in 0..4 {
                assert!((mixed[s] - direct[s]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn augmented_evaluation_matches_delay_simulator() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mdp = random_mdp(3, 2, 0.8, &mut rng).unwrap();
    let behavior = TabularPolicy::random(3, 2, &mut rng);
    let delay = 2;
    let aug = build_augmented_mdp(&mdp, delay, 0).unwrap();
    for idx in 0..aug.n_states() {
        let sum: f64 = aug.row(idx, 0).iter().map(|(_, p)| p).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
    let lifted = lift_policy(&mdp, &behavior, delay).unwrap();
    let exact = exact_policy_evaluation(&aug, &lifted, DEFAULT_TOL)
        .unwrap()
        .expected_value(aug.rho0());
    let n = 20_000;
    let returns: Vec<f64> = (0..n)
        .map(|_| simulate_return(&mdp, &lifted, delay, 0, 150, &mut rng))
        .collect();
    let mean = returns.iter().sum::<f64>() / n as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - exact).abs() <= 3.0 * se, "mc {mean} exact {exact} se {se}");
}

fn random_trajectory(rng: &mut ChaCha8Rng, len: usize) -> Vec<Transition<usize, usize>> {
    let mut s = rng.random_range(0..5);
    (0..len)
        .map(|t| {
            let s_next = rng.random_range(0..5);
            let tr = Transition {
                s,
                a: rng.random_range(0..3),
                r: rng.random(),
                s_next,
                done: t + 1 == len,
            };
            s = s_next;
            tr
        })
        .collect()
}

#[test]
fn tuple_counts_and_zero_delay() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let traj = random_trajectory(&mut rng, 5);
    assert_eq!(augment_trajectory(&traj, 2).len(), 3);
    assert!(augment_trajectory(&traj, 5).is_empty());
    let raw = augment_trajectory(&traj, 0);
    for (tup, tr) in raw.iter().zip(&traj) {
        assert_eq!(tup.x.base, tr.s);
        assert!(tup.x.window.is_empty());
        assert_eq!((tup.a, tup.r, tup.x_next.base, tup.done), (tr.a, tr.r, tr.s_next, tr.done));
    }
}

#[test]
fn tuples_shift_windows_and_invert() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let traj = random_trajectory(&mut rng, 100);
    for delay in 0..5 {
        let tuples = augment_trajectory(&traj, delay);
        assert_eq!(tuples.len(), 100 - delay);
        for (i, tup) in tuples.iter().enumerate() {
            assert_eq!(tup.x_next.window, tup.x.shifted_window(tup.a));
            assert_eq!(tup.x.base, traj[i].s);
            assert_eq!(tup.x_next.base, traj[i].s_next);
            assert_eq!(tup.true_state, traj[i + delay].s);
            assert_eq!(tup.intermediate.last().copied().unwrap_or(tup.x.base), tup.true_state);
        }
        assert_eq!(recover_trajectory(&tuples), traj);
    }
}

#[test]
fn boundary_samples_are_masked_and_labelled() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let traj = random_trajectory(&mut rng, 10);
    let samples = belief_samples(&traj, 3, 0usize);
    assert_eq!(samples.len(), 2 + 7);
    assert_eq!(samples[0].n_masked, 2);
    assert_eq!(samples[0].labels, vec![traj[1].s]);
    assert_eq!(samples[1].n_masked, 1);
    assert_eq!(samples[1].window[1..], [traj[0].a, traj[1].a]);
    assert!(samples[2..].iter().all(|s| s.n_masked == 0 && s.labels.len() == 3));
}
