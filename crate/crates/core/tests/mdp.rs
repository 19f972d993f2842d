use dtcorl_core::mdp::{
    estimate_lipschitz_constants, exact_policy_evaluation, exact_policy_iteration, random_mdp,
    solve::bellman_residual, two_state_chain, wasserstein::w1_flow, wasserstein1, Metric,
    TabularMdp, TabularPolicy, DEFAULT_TOL,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Plain value iteration with dense loops, run for a fixed long horizon.
fn value_iteration_oracle(mdp: &TabularMdp, policy: Option<&TabularPolicy>, steps: usize) -> Vec<Vec<f64>> {
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    let mut q = vec![vec![0.0; n_a]; n_s];
    for _ in 0..steps {
        let v: Vec<f64> = (0..n_s)
            .map(|s| match policy {
                Some(p) => (0..n_a).map(|a| p.row(s)[a] * q[s][a]).sum(),
                None => q[s].iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            })
            .collect();
        for s in 0..n_s {
            for a in 0..n_a {
                let mut next = 0.0;
                for s2 in 0..n_s {
                    next += mdp.prob(s, a, s2) * v[s2];
                }
                q[s][a] = mdp.reward(s, a) + mdp.gamma() * next;
            }
        }
    }
    q
}

#[test]
fn chain_evaluation_matches_long_value_iteration() {
    let mdp = two_state_chain(0.8, 0.9).unwrap();
    let pol = TabularPolicy::uniform(2, 2);
    let vt = exact_policy_evaluation(&mdp, &pol, DEFAULT_TOL).unwrap();
    let oracle = value_iteration_oracle(&mdp, Some(&pol), 10_000);
    for s in 0..2 {
        for a in 0..2 {
            assert!((vt.q[s][a] - oracle[s][a]).abs() < 1e-9, "q[{s}][{a}]");
        }
        let v: f64 = (0..2).map(|a| 0.5 * vt.q[s][a]).sum();
        assert!((vt.v[s] - v).abs() < 1e-12);
    }
    assert!(bellman_residual(&mdp, &pol, &vt.q) <= DEFAULT_TOL);
}

#[test]
fn zero_reward_gives_zero_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let base = random_mdp(4, 3, 0.9, &mut rng).unwrap();
    let doc = {
        let mut d = base.to_document().unwrap();
        d.reward = vec![vec![0.0; 3]; 4];
        d
    };
    let mdp = TabularMdp::from_document(doc).unwrap();
    let pol = TabularPolicy::random(4, 3, &mut rng);
    let vt = exact_policy_evaluation(&mdp, &pol, DEFAULT_TOL).unwrap();
    assert!(vt.q.iter().flatten().all(|&q| q == 0.0));
    let (_, vt) = exact_policy_iteration(&mdp, DEFAULT_TOL).unwrap();
    assert!(vt.q.iter().flatten().all(|&q| q == 0.0));
}

#[test]
fn chain_policy_iteration_reaches_rewarding_state() {
    let mdp = two_state_chain(0.8, 0.9).unwrap();
    let (pol, vt) = exact_policy_iteration(&mdp, DEFAULT_TOL).unwrap();
    // Flip out of s0, stay in s1.
    assert_eq!(pol.mode(0), 1);
    assert_eq!(pol.mode(1), 0);
    let oracle = value_iteration_oracle(&mdp, None, 10_000);
    for s in 0..2 {
        let best = oracle[s].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((vt.v[s] - best).abs() < 1e-9);
    }
}

#[test]
fn policy_iteration_dominates_random_policies() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mdp = random_mdp(5, 3, 0.9, &mut rng).unwrap();
    let (pol, best) = exact_policy_iteration(&mdp, DEFAULT_TOL).unwrap();
    for s in 0..5 {
        let a = pol.mode(s);
        for b in 0..3 {
            assert!(best.q[s][b] <= best.q[s][a] + DEFAULT_TOL);
        }
    }
    for _ in 0..100 {
        let other = TabularPolicy::random(5, 3, &mut rng);
        let vt = exact_policy_evaluation(&mdp, &other, DEFAULT_TOL).unwrap();
        for s in 0..5 {
            assert!(vt.v[s] <= best.v[s] + 1e-9);
        }
    }
}

#[test]
fn chain_lipschitz_constants_by_enumeration() {
    let mdp = two_state_chain(0.8, 0.9).unwrap();
    let pol = TabularPolicy::uniform(2, 2);
    let vt = exact_policy_evaluation(&mdp, &pol, DEFAULT_TOL).unwrap();
    let est = estimate_lipschitz_constants(&mdp, &pol, &vt).unwrap();

    // Independent enumeration over (s, a) pairs with 1D CDF distances.
    let rows: Vec<(usize, usize)> = (0..2).flat_map(|s| (0..2).map(move |a| (s, a))).collect();
    let (mut lp, mut lr, mut lq) = (0.0f64, 0.0f64, 0.0f64);
    for &(s1, a1) in &rows {
        for &(s2, a2) in &rows {
            let d = (s1 as f64 - s2 as f64).abs() + (a1 as f64 - a2 as f64).abs();
            if d == 0.0 {
                continue;
            }
            let w = (mdp.prob(s1, a1, 0) - mdp.prob(s2, a2, 0)).abs();
            lp = lp.max(w / d);
            lr = lr.max((mdp.reward(s1, a1) - mdp.reward(s2, a2)).abs() / d);
            lq = lq.max((vt.q[s1][a1] - vt.q[s2][a2]).abs() / d);
        }
    }
    assert!((est.l_p - lp).abs() < 1e-12);
    assert!((est.l_r - lr).abs() < 1e-12);
    assert!((est.l_q_empirical - lq).abs() < 1e-12);
    assert_eq!(est.l_pi, 0.0);
    assert_eq!(est.contraction_ok, 0.9 * lp < 1.0);
    assert_eq!(est.l_q.is_finite(), est.contraction_ok);
}

#[test]
fn lipschitz_estimates_have_no_violated_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..5 {
        let mdp = random_mdp(4, 3, 0.9, &mut rng).unwrap();
        let pol = TabularPolicy::random(4, 3, &mut rng);
        let vt = exact_policy_evaluation(&mdp, &pol, DEFAULT_TOL).unwrap();
        let est = estimate_lipschitz_constants(&mdp, &pol, &vt).unwrap();
        for s1 in 0..4 {
            for a1 in 0..3 {
                for s2 in 0..4 {
                    for a2 in 0..3 {
                        let d = mdp.state_metric().dist(s1, s2) + mdp.action_metric().dist(a1, a2);
                        let w = wasserstein1(
                            &mdp.dense_row(s1, a1),
                            &mdp.dense_row(s2, a2),
                            mdp.state_metric(),
                        )
                        .unwrap();
                        assert!(w <= est.l_p * d + 1e-12);
                        let dr = (mdp.reward(s1, a1) - mdp.reward(s2, a2)).abs();
                        assert!(dr <= est.l_r * d + 1e-12);
                        let dq = (vt.q[s1][a1] - vt.q[s2][a2]).abs();
                        assert!(dq <= est.l_q_empirical * d + 1e-12);
                    }
                }
            }
            for s2 in 0..4 {
                let w = wasserstein1(pol.row(s1), pol.row(s2), mdp.action_metric()).unwrap();
                assert!(w <= est.l_pi * mdp.state_metric().dist(s1, s2) + 1e-12);
            }
        }
    }
}

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_map(|mut v| {
        // keep some exact zeros to exercise support compression
        for x in v.iter_mut() {
            if *x < 0.2 {
                *x = 0.0;
            }
        }
        if v.iter().all(|&x| x == 0.0) {
            v[0] = 1.0;
        }
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn triple() -> impl Strategy<Value = (Vec<[f64; 2]>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..=8).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::array::uniform2(-1.0f64..1.0), n),
            simplex(n),
            simplex(n),
            simplex(n),
        )
    })
}

fn euclidean(points: &[[f64; 2]]) -> Metric {
    let d = points
        .iter()
        .map(|a| {
            points
                .iter()
                .map(|b| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
                .collect()
        })
        .collect();
    Metric::Matrix(d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn w1_metric_axioms((points, p, q, r) in triple()) {
        let m = euclidean(&points);
        let pq = wasserstein1(&p, &q, &m).unwrap();
        let qp = wasserstein1(&q, &p, &m).unwrap();
        let pr = wasserstein1(&p, &r, &m).unwrap();
        let qr = wasserstein1(&q, &r, &m).unwrap();
        prop_assert!(pq >= -1e-12);
        prop_assert!((pq - qp).abs() < 1e-9);
        prop_assert!(wasserstein1(&p, &p, &m).unwrap().abs() < 1e-12);
        prop_assert!(pr <= pq + qr + 1e-9);
    }

    #[test]
    fn cdf_formula_agrees_with_flow((_, p, q, _) in triple()) {
        let n = p.len();
        let cdf = wasserstein1(&p, &q, &Metric::Index(n)).unwrap();
        let flow = w1_flow(&p, &q, |i, j| (i as f64 - j as f64).abs()).unwrap();
        prop_assert!((cdf - flow).abs() < 1e-9, "cdf {} flow {}", cdf, flow);
    }
}
