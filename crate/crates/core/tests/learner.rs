use dtcorl_core::belief::{AnalyticBelief, BeliefModel};
use dtcorl_core::delayed::{all_beliefs, build_augmented_mdp, lift_policy};
use dtcorl_core::error::Error;
use dtcorl_core::learner::neural::{
    actor_loss_and_grads, actor_update, critic_loss_and_grads, critic_update, flatten_window, target_noise,
    td_targets,
};
use dtcorl_core::learner::tabular::{simplex_grid, state_penalty};
use dtcorl_core::learner::train::DelayedData;
use dtcorl_core::learner::*;
use dtcorl_core::mdp::{
    argmax, exact_policy_evaluation, exact_policy_iteration, random_deterministic_mdp, random_mdp, random_simplex,
    two_state_chain, TabularPolicy, DEFAULT_TOL,
};
use dtcorl_core::nn::gradcheck::gradient_check;
use dtcorl_core::nn::layers::rows_to_mat;
use dtcorl_core::nn::{Mat, Tape};
use dtcorl_core::rollout::{generate_behavior_dataset, BehaviorKind, Env, PointMass1D};
use dtcorl_core::belief::MaskedWindow;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn zero_penalties(gamma: f64) -> LearnerConfig {
    LearnerConfig::unpenalized(gamma)
}

fn uniform_mu(ctx: &BeliefContext, n_a: usize) -> BehaviorModel {
    BehaviorModel {
        probs: vec![vec![1.0 / n_a as f64; n_a]; ctx.n_augmented()],
    }
}

// ── Tabular evaluation ───────────────────────────────────────────────────

#[test]
fn bpe_without_delay_or_penalty_is_policy_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let mdp = random_mdp(4, 3, 0.9, &mut rng).unwrap();
        let pol = TabularPolicy::random(4, 3, &mut rng);
        let ctx = BeliefContext::enumerate(&mdp, 0).unwrap();
        let mu = uniform_mu(&ctx, 3);
        let res = tabular_bpe(&mdp, &ctx, &pol, &mu, &zero_penalties(0.9)).unwrap();
        let oracle = exact_policy_evaluation(&mdp, &pol, DEFAULT_TOL).unwrap();
        for s in 0..4 {
            for a in 0..3 {
                assert!((res.values.q[s][a] - oracle.q[s][a]).abs() < 1e-8);
            }
        }
        assert!(res.penalty.iter().all(|&p| p == 0.0));
    }
}

#[test]
fn bpe_fixed_point_holds_under_belief_weighting() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for delay in [1, 2] {
        let mdp = random_mdp(3, 2, 0.9, &mut rng).unwrap();
        let pol = TabularPolicy::random(3, 2, &mut rng);
        let ctx = BeliefContext::enumerate(&mdp, delay).unwrap();
        let mu = uniform_mu(&ctx, 2);
        let res = tabular_bpe(&mdp, &ctx, &pol, &mu, &zero_penalties(0.9)).unwrap();
        assert!(res.belief_residual < 1e-8, "{}", res.belief_residual);
    }
}

#[test]
fn bpe_on_deterministic_mdp_matches_delay_free_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for delay in [1, 2, 3] {
        let mdp = random_deterministic_mdp(4, 2, 0.9, &mut rng).unwrap();
        let pol = TabularPolicy::random(4, 2, &mut rng);
        let ctx = BeliefContext::enumerate(&mdp, delay).unwrap();
        assert!(ctx.beliefs.iter().all(|b| b.is_point_mass()));
        let mu = uniform_mu(&ctx, 2);
        let res = tabular_bpe(&mdp, &ctx, &pol, &mu, &zero_penalties(0.9)).unwrap();
        let oracle = exact_policy_evaluation(&mdp, &pol, DEFAULT_TOL).unwrap();
        for (x, b) in ctx.beliefs.iter().enumerate() {
            let s = argmax(b.probs());
            for a in 0..2 {
                assert!((res.values.q[s][a] - oracle.q[s][a]).abs() < 1e-8, "x = {x}");
            }
        }
    }
}

#[test]
fn matching_behavior_policy_adds_no_penalty() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mdp = random_mdp(3, 3, 0.9, &mut rng).unwrap();
    let row = random_simplex(3, &mut rng);
    let pol = TabularPolicy::new(vec![row; 3]).unwrap();
    let ctx = BeliefContext::enumerate(&mdp, 1).unwrap();
    let mu = BehaviorModel::lifted(&ctx, &pol).unwrap();
    let penalized = LearnerConfig {
        lambda1: 5.0,
        ..zero_penalties(0.9)
    };
    let with = tabular_bpe(&mdp, &ctx, &pol, &mu, &penalized).unwrap();
    let without = tabular_bpe(&mdp, &ctx, &pol, &mu, &zero_penalties(0.9)).unwrap();
    assert!(with.penalty.iter().all(|p| p.abs() < 1e-12));
    for s in 0..3 {
        for a in 0..3 {
            assert!((with.values.q[s][a] - without.values.q[s][a]).abs() < 1e-10);
        }
    }
}

#[test]
fn uncovered_states_are_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mdp = random_deterministic_mdp(3, 2, 0.9, &mut rng).unwrap();
    let ctx = BeliefContext::new(&mdp, 0, vec![1.0, 0.0, 0.0]).unwrap();
    let mu = uniform_mu(&ctx, 2);
    let pol = TabularPolicy::uniform(3, 2);
    match tabular_bpe(&mdp, &ctx, &pol, &mu, &zero_penalties(0.9)) {
        Err(Error::RankDeficient { uncovered }) => assert_eq!(uncovered, vec![1, 2]),
        other => panic!("expected rank deficiency, got {other:?}"),
    }
    let empty = BeliefContext::new(&mdp, 0, vec![0.0; 3]).unwrap();
    let q = vec![vec![0.0; 2]; 3];
    let r = tabular_bpi(&mdp, &empty, &q, &mu, &pol, &zero_penalties(0.9));
    assert!(matches!(r, Err(Error::EmptySupport)));
}

// ── Tabular improvement ──────────────────────────────────────────────────

#[test]
fn bpi_without_penalty_is_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mdp = random_mdp(4, 3, 0.9, &mut rng).unwrap();
    let ctx = BeliefContext::enumerate(&mdp, 1).unwrap();
    let mu = uniform_mu(&ctx, 3);
    let q: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
    let start = TabularPolicy::uniform(4, 3);
    let out = tabular_bpi(&mdp, &ctx, &q, &mu, &start, &zero_penalties(0.9)).unwrap();
    assert_eq!(out, TabularPolicy::greedy(&q));
}

#[test]
fn dominant_penalty_returns_behavior_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mdp = random_mdp(3, 3, 0.9, &mut rng).unwrap();
    let ctx = BeliefContext::enumerate(&mdp, 0).unwrap();
    let mu = BehaviorModel {
        probs: (0..3).map(|_| random_simplex(3, &mut rng)).collect(),
    };
    let q: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
    let range = q.iter().flatten().cloned().fold(f64::MIN, f64::max) - q.iter().flatten().cloned().fold(f64::MAX, f64::min);
    let cfg = LearnerConfig {
        lambda2: 10.0 * range / mdp.action_metric().min_positive(),
        ..zero_penalties(0.9)
    };
    let start = TabularPolicy::deterministic(&[0, 0, 0], 3);
    let out = tabular_bpi(&mdp, &ctx, &q, &mu, &start, &cfg).unwrap();
    for s in 0..3 {
        for a in 0..3 {
            assert!((out.row(s)[a] - mu.row(s)[a]).abs() <= 2.0 / 64.0 + 1e-12, "{:?} vs {:?}", out.row(s), mu.row(s));
        }
    }
}

#[test]
fn two_state_improvement_matches_grid_search() {
    let mdp = two_state_chain(0.3, 0.9).unwrap();
    let delay = 1;
    let ctx = BeliefContext::enumerate(&mdp, delay).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mu = BehaviorModel {
        probs: (0..ctx.n_augmented()).map(|_| random_simplex(2, &mut rng)).collect(),
    };
    let q = vec![vec![1.0, 0.4], vec![0.2, 0.9]];
    let lambda = 0.3;
    let cfg = LearnerConfig {
        lambda2: lambda,
        ..zero_penalties(0.9)
    };
    let start = TabularPolicy::deterministic(&[1, 0], 2);
    let out = tabular_bpi(&mdp, &ctx, &q, &mu, &start, &cfg).unwrap();

    // Posterior over augmented states with unit sample weights.
    let beliefs = all_beliefs(&mdp, delay).unwrap();
    for s in 0..2 {
        let w: Vec<f64> = beliefs.iter().map(|b| b.probs()[s]).collect();
        let total: f64 = w.iter().sum();
        let objective = |p0: f64| {
            let gain = p0 * q[s][0] + (1.0 - p0) * q[s][1];
            let pen: f64 = w.iter().zip(&mu.probs).map(|(wx, m)| wx / total * (p0 - m[0]).abs()).sum();
            gain - lambda * pen
        };
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in (0..=64).rev() {
            let p0 = k as f64 / 64.0;
            let v = objective(p0);
            if v > best.0 {
                best = (v, p0);
            }
        }
        let incumbent = start.row(s)[0];
        let want = if best.0 > objective(incumbent) + DEFAULT_TOL { best.1 } else { incumbent };
        assert_eq!(out.row(s)[0], want, "state {s}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shifting_q_leaves_improvement_unchanged(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = random_mdp(3, 3, 0.9, &mut rng).unwrap();
        let ctx = BeliefContext::enumerate(&mdp, 1).unwrap();
        let mu = BehaviorModel::lifted(&ctx, &TabularPolicy::random(3, 3, &mut rng)).unwrap();
        let cfg = LearnerConfig { lambda2: 0.4, grid_resolution: 16, ..zero_penalties(0.9) };
        // Shifts that are exact in binary keep the comparison free of roundoff.
        let shift = (shift * 8.0).round() / 8.0;
        let q: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| (rng.random::<f64>() * 64.0).round() / 64.0).collect()).collect();
        let shifted: Vec<Vec<f64>> = q.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let start = TabularPolicy::uniform(3, 3);
        let a = tabular_bpi(&mdp, &ctx, &q, &mu, &start, &cfg).unwrap();
        let b = tabular_bpi(&mdp, &ctx, &shifted, &mu, &start, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn simplex_grid_is_ordered_and_complete() {
    let g = simplex_grid(3, 4).unwrap();
    assert_eq!(g.len(), 15);
    assert_eq!(g[0], vec![1.0, 0.0, 0.0]);
    assert_eq!(*g.last().unwrap(), vec![0.0, 0.0, 1.0]);
    assert!(g.iter().all(|p| (p.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    assert!(simplex_grid(8, 64).is_err());
}

// ── Reductions and the improvement property ──────────────────────────────

#[test]
fn belief_policy_iteration_reduces_to_policy_iteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let mdp = random_mdp(5, 3, 0.9, &mut rng).unwrap();
        let ctx = BeliefContext::enumerate(&mdp, 0).unwrap();
        let mu = uniform_mu(&ctx, 3);
        let (pol, eval) = belief_policy_iteration(&mdp, &ctx, &mu, &zero_penalties(0.9), 100).unwrap();
        let (oracle, values) = exact_policy_iteration(&mdp, DEFAULT_TOL).unwrap();
        assert_eq!(pol, oracle);
        for s in 0..5 {
            assert!((eval.values.v[s] - values.v[s]).abs() < 1e-8);
        }
    }
}

#[test]
fn monotone_improvement_on_random_mdps() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = LearnerConfig {
        grid_resolution: 16,
        ..LearnerConfig::default()
    };
    for _ in 0..6 {
        let mdp = random_mdp(4, 3, 0.9, &mut rng).unwrap();
        for delay in [1, 2] {
            let rep = check_monotone_improvement(&mdp, delay, &cfg, 5, None).unwrap();
            assert!(rep.violations.is_empty(), "{:?}", rep.violations);
            assert!(rep.min_slack >= -1e-8);
            assert_eq!(rep.trace.len(), 6);
        }
    }
}

#[test]
fn unpenalized_trace_matches_policy_iteration_and_settles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mdp = random_mdp(4, 3, 0.9, &mut rng).unwrap();
    let rep = check_monotone_improvement(&mdp, 0, &zero_penalties(0.9), 10, None).unwrap();
    let (_, values) = exact_policy_iteration(&mdp, DEFAULT_TOL).unwrap();
    let last = rep.trace.last().unwrap();
    let prev = &rep.trace[rep.trace.len() - 2];
    for s in 0..4 {
        assert!((last[s] - values.v[s]).abs() < 1e-8);
        assert!((last[s] - prev[s]).abs() < 1e-8);
    }
}

#[test]
fn remark_identities_on_deterministic_mdps() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for delay in [1, 2] {
        let mdp = random_deterministic_mdp(3, 2, 0.9, &mut rng).unwrap();
        let pol = TabularPolicy::random(3, 2, &mut rng);
        let aug = build_augmented_mdp(&mdp, delay, 0).unwrap();
        let lifted = lift_policy(&mdp, &pol, delay).unwrap();
        let q_aug = exact_policy_evaluation(&aug, &lifted, DEFAULT_TOL).unwrap();
        let q = exact_policy_evaluation(&mdp, &pol, DEFAULT_TOL).unwrap();
        for (x, b) in all_beliefs(&mdp, delay).unwrap().iter().enumerate() {
            let s = argmax(b.probs());
            for a in 0..2 {
                let r_belief = b.expect(|s| mdp.reward(s, a));
                assert!((r_belief - aug.reward(x, a)).abs() < 1e-9);
                assert!((aug.reward(x, a) - mdp.reward(s, a)).abs() < 1e-9);
                let q_belief = b.expect(|s| q.q[s][a]);
                assert!((q_belief - q_aug.q[x][a]).abs() < 1e-9, "x = {x}, a = {a}");
            }
        }
    }
}

#[test]
fn state_penalty_is_posterior_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mdp = random_mdp(2, 2, 0.9, &mut rng).unwrap();
    let ctx = BeliefContext::enumerate(&mdp, 1).unwrap();
    let mu = BehaviorModel {
        probs: (0..ctx.n_augmented()).map(|_| random_simplex(2, &mut rng)).collect(),
    };
    let p = [0.25, 0.75];
    for s in 0..2 {
        let w: Vec<f64> = ctx.beliefs.iter().map(|b| b.probs()[s]).collect();
        let total: f64 = w.iter().sum();
        let want: f64 = w.iter().zip(&mu.probs).map(|(wx, m)| wx / total * (p[0] - m[0]).abs()).sum();
        let got = state_penalty(&mdp, &ctx, &mu, s, &p).unwrap();
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn config_validation_and_round_trip() {
    let cfg = LearnerConfig::default();
    assert_eq!(cfg.actor_lr, 3e-4);
    assert_eq!(cfg.critic_lr, 1e-3);
    assert_eq!(cfg.tau, 5e-3);
    assert_eq!(cfg.actor_freq, 2);
    assert_eq!(cfg.batch_size, 256);
    assert_eq!(cfg.policy_noise, 0.2);
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<LearnerConfig>(&text).unwrap(), cfg);
    assert!(LearnerConfig { lambda1: -1.0, ..cfg.clone() }.validate().is_err());
    assert!(LearnerConfig { actor_freq: 0, ..cfg.clone() }.validate().is_err());
    assert!(LearnerConfig { gamma: 1.0, ..cfg }.validate().is_err());
}

// ── Neural updates ───────────────────────────────────────────────────────

fn pointmass_data(delay: usize, k: usize) -> (PointMass1D, DelayedData) {
    let env = PointMass1D {
        noise: 0.0,
        ..Default::default()
    };
    let trajs = generate_behavior_dataset(&env, BehaviorKind::Medium, k, 0);
    let data = DelayedData::new(&trajs, delay).unwrap();
    (env, data)
}

fn small_cfg(gamma: f64) -> LearnerConfig {
    LearnerConfig {
        gamma,
        hidden: 32,
        batch_size: 16,
        ..LearnerConfig::default()
    }
}

#[test]
fn zero_discount_targets_are_rewards() {
    let (_, data) = pointmass_data(0, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let picked = data.sample_tuples(16, &mut rng);
    let batch = UpdateBatch::from_true_states(&picked).unwrap();
    let cfg = small_cfg(0.0);
    let actor = NeuralActor::new(1, 1, 32, cfg.actor_lr, &mut rng);
    let critic = NeuralCritic::new(1, 1, 32, cfg.critic_lr, &mut rng);
    let noise = target_noise(16, 1, &cfg, &mut rng);
    let y = td_targets(&critic, &actor, &batch, &noise, &cfg).unwrap();
    assert_eq!(y, batch.rewards);
    let (loss, _) = critic_loss_and_grads(&critic, &critic.params, &batch, &y);
    let (q1, q2) = critic.q_values(&batch.states, &batch.actions);
    let n = 16.0;
    let want: f64 = q1.iter().zip(&y).map(|(q, r)| (q - r).powi(2)).sum::<f64>() / n
        + q2.iter().zip(&y).map(|(q, r)| (q - r).powi(2)).sum::<f64>() / n;
    assert!((loss - want).abs() < 1e-12);
}

#[test]
fn perfect_belief_matches_delay_free_targets() {
    let (env, data) = pointmass_data(4, 4);
    let belief = AnalyticBelief::new(1, 4, move |s: &[f64], a: &[f64]| env.mean_step(s, a));
    let cfg = small_cfg(0.99);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let actor = NeuralActor::new(1, 1, 32, cfg.actor_lr, &mut rng);
    let critic = NeuralCritic::new(1, 1, 32, cfg.critic_lr, &mut rng);
    for _ in 0..10 {
        let picked = data.sample_tuples(32, &mut rng);
        let est = UpdateBatch::from_tuples(&picked, &belief, &mut rng).unwrap();
        let truth = UpdateBatch::from_true_states(&picked).unwrap();
        let noise = target_noise(32, 1, &cfg, &mut rng);
        let y_est = td_targets(&critic, &actor, &est, &noise, &cfg).unwrap();
        let y_true = td_targets(&critic, &actor, &truth, &noise, &cfg).unwrap();
        for (a, b) in y_est.iter().zip(&y_true) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn critic_update_is_deterministic_and_targets_trail() {
    let (_, data) = pointmass_data(2, 2);
    let cfg = small_cfg(0.99);
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let actor = NeuralActor::new(1, 1, 32, cfg.actor_lr, &mut rng);
        let mut critic = NeuralCritic::new(1, 1, 32, cfg.critic_lr, &mut rng);
        let picked = data.sample_tuples(16, &mut rng);
        let batch = UpdateBatch::from_true_states(&picked).unwrap();
        for _ in 0..3 {
            let before = critic.target.clone();
            critic_update(&mut critic, &actor, &batch, &cfg, &mut rng).unwrap();
            for ((t, old), live) in critic.target.values().iter().zip(before.values()).zip(critic.params.values()) {
                let want: Mat = live * cfg.tau + old * (1.0 - cfg.tau);
                assert!((t - want).abs().max() < 1e-15);
            }
        }
        critic.params.values().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn behavior_proxy_shifts_targets() {
    let (_, data) = pointmass_data(0, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let picked = data.sample_tuples(8, &mut rng);
    let batch = UpdateBatch::from_true_states(&picked).unwrap();
    let cfg = small_cfg(0.9);
    let proxy = LearnerConfig {
        critic_bc_proxy: true,
        lambda1: 0.7,
        ..cfg.clone()
    };
    let actor = NeuralActor::new(1, 1, 32, cfg.actor_lr, &mut rng);
    let critic = NeuralCritic::new(1, 1, 32, cfg.critic_lr, &mut rng);
    let noise = target_noise(8, 1, &cfg, &mut rng);
    let plain = td_targets(&critic, &actor, &batch, &noise, &cfg).unwrap();
    let shifted = td_targets(&critic, &actor, &batch, &noise, &proxy).unwrap();
    let pi = actor.act(&batch.states).unwrap();
    for i in 0..8 {
        let want = plain[i] - 0.7 * (pi[i][0] - batch.actions[i][0]).powi(2);
        assert!((shifted[i] - want).abs() < 1e-12);
    }
}

fn cosine(a: &[Mat], b: &[Mat]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.dot(y)).sum();
    let na: f64 = a.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn large_alpha_approaches_behavior_cloning() {
    let (_, data) = pointmass_data(0, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let picked = data.sample_tuples(32, &mut rng);
    let batch = UpdateBatch::from_true_states(&picked).unwrap();
    let actor = NeuralActor::new(1, 1, 32, 3e-4, &mut rng);
    let critic = NeuralCritic::new(1, 1, 32, 1e-3, &mut rng);
    let grads = |alpha: f64| actor_loss_and_grads(&actor, &actor.params, &critic, &batch.states, &batch.actions, alpha).unwrap().1;
    let g0 = grads(0.0);
    let g1 = grads(1.0);
    // The loss is affine in alpha, so the BC gradient is the difference.
    let bc: Vec<Mat> = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
    let c6 = cosine(&grads(1e6), &bc);
    let c8 = cosine(&grads(1e8), &bc);
    assert!(c8 >= c6 - 1e-12);
    assert!(c8 > 1.0 - 1e-9, "{c8}");
}

#[test]
fn zero_alpha_is_pure_policy_gradient() {
    let (_, data) = pointmass_data(0, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let picked = data.sample_tuples(16, &mut rng);
    let batch = UpdateBatch::from_true_states(&picked).unwrap();
    let actor = NeuralActor::new(1, 1, 32, 3e-4, &mut rng);
    let critic = NeuralCritic::new(1, 1, 32, 1e-3, &mut rng);
    let (loss, _) = actor_loss_and_grads(&actor, &actor.params, &critic, &batch.states, &batch.actions, 0.0).unwrap();
    let pi = actor.act(&batch.states).unwrap();
    let (q1, _) = critic.q_values(&batch.states, &pi);
    let want = -q1.iter().sum::<f64>() / 16.0;
    assert!((loss - want).abs() < 1e-12);
}

#[test]
fn constant_critic_leaves_only_the_cloning_term() {
    let (_, data) = pointmass_data(0, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let picked = data.sample_tuples(16, &mut rng);
    let batch = UpdateBatch::from_true_states(&picked).unwrap();
    let actor = NeuralActor::new(1, 1, 32, 3e-4, &mut rng);
    let mut critic = NeuralCritic::new(1, 1, 32, 1e-3, &mut rng);
    let names = critic.params.names().to_vec();
    for (name, v) in names.iter().zip(critic.params.values_mut()) {
        if name.starts_with("q1.") && name.ends_with(".w") && name.contains(".2.") {
            v.fill(0.0);
        }
    }
    let alpha = 2.5;
    let states = batch.states.clone();
    let actions = batch.actions.clone();
    let bc_only = |ps: &dtcorl_core::nn::ParamSet| {
        let mut tape = Tape::new();
        let x = tape.constant(rows_to_mat(&states));
        let pi = actor.forward(&mut tape, ps, x);
        let pi = tape.value(pi).clone();
        let a = rows_to_mat(&actions);
        alpha * (pi - a).norm_squared() / states.len() as f64
    };
    let report = gradient_check(&actor.params, 200, &mut rng, |ps| {
        let (_, g) = actor_loss_and_grads(&actor, ps, &critic, &states, &actions, alpha)?;
        Ok((bc_only(ps), g))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{}", report.max_rel_error);
}

#[test]
fn actor_outputs_stay_in_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let actor = NeuralActor::new(2, 3, 16, 3e-4, &mut rng);
    let states: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)]).collect();
    for a in actor.act(&states).unwrap() {
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn actor_update_soft_updates_target() {
    let (_, data) = pointmass_data(0, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let picked = data.sample_tuples(16, &mut rng);
    let batch = UpdateBatch::from_true_states(&picked).unwrap();
    let cfg = small_cfg(0.9);
    let mut actor = NeuralActor::new(1, 1, 32, cfg.actor_lr, &mut rng);
    let critic = NeuralCritic::new(1, 1, 32, cfg.critic_lr, &mut rng);
    let before = actor.target.clone();
    actor_update(&mut actor, &critic, &batch, &cfg).unwrap();
    assert_eq!(actor.steps(), 1);
    for ((t, old), live) in actor.target.values().iter().zip(before.values()).zip(actor.params.values()) {
        let want: Mat = live * cfg.tau + old * (1.0 - cfg.tau);
        assert!((t - want).abs().max() < 1e-15);
    }
}

#[test]
fn empty_batches_and_datasets_are_rejected() {
    assert!(matches!(UpdateBatch::from_true_states(&[]), Err(Error::EmptyBatch)));
    let cfg = TrainConfig::default();
    let mut belief = BeliefModel::Fixed(Box::new(AnalyticBelief::new(1, 4, |s: &[f64], _: &[f64]| s.to_vec())));
    let r = train_dtcorl(&[], &mut belief, &cfg, true, None);
    assert!(matches!(r, Err(Error::EmptyDataset)));
    assert!(matches!(train_augmented_bc(&[vec![]], &cfg, None), Err(Error::EmptyDataset)));
}

// ── Augmented behavior cloning ───────────────────────────────────────────

#[test]
fn augmented_bc_recovers_linear_policy() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut bc = AugmentedBc::new(1, 1, 0, 64, 3e-3, &mut rng);
    let policy = |s: f64| 0.5 * s;
    for _ in 0..3000 {
        let states: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let windows: Vec<MaskedWindow> = states.iter().map(|&s| MaskedWindow::new(vec![s], vec![], 0)).collect();
        let actions: Vec<Vec<f64>> = states.iter().map(|&s| vec![policy(s)]).collect();
        bc.train_step(&windows, &actions).unwrap();
    }
    let held: Vec<f64> = (0..50).map(|i| -0.95 + 1.9 * i as f64 / 49.0).collect();
    let windows: Vec<MaskedWindow> = held.iter().map(|&s| MaskedWindow::new(vec![s], vec![], 0)).collect();
    let out = bc.act(&windows).unwrap();
    for (s, a) in held.iter().zip(&out) {
        assert!((a[0] - policy(*s)).abs() < 1e-2, "s = {s}: {}", a[0]);
    }
}

#[test]
fn augmented_bc_memorizes_a_single_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut bc = AugmentedBc::new(1, 1, 3, 32, 1e-3, &mut rng);
    let w = MaskedWindow::new(vec![0.3], vec![vec![0.1], vec![-0.2], vec![0.5]], 0);
    let windows = vec![w; 8];
    let actions = vec![vec![0.42]; 8];
    let first = bc.train_step(&windows, &actions).unwrap();
    let mut last = first;
    for _ in 0..500 {
        last = bc.train_step(&windows, &actions).unwrap();
    }
    assert!(last < 1e-6 && last < first, "{first} -> {last}");
}

#[test]
fn zero_delay_augmented_bc_is_plain_bc() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let bc = AugmentedBc::new(2, 1, 0, 16, 1e-3, &mut rng);
    let states = vec![vec![0.1, -0.4], vec![0.7, 0.2]];
    let windows: Vec<MaskedWindow> = states.iter().map(|s| MaskedWindow::new(s.clone(), vec![], 0)).collect();
    assert_eq!(bc.act(&windows).unwrap(), bc.actor.act(&states).unwrap());
    assert_eq!(flatten_window(&windows[0], 0).unwrap(), states[0]);
}

#[test]
fn flatten_window_right_aligns_and_zeroes_masks() {
    let w = MaskedWindow::new(vec![9.0], vec![vec![0.0], vec![1.0], vec![2.0]], 1);
    assert_eq!(flatten_window(&w, 5).unwrap(), vec![9.0, 0.0, 0.0, 0.0, 1.0, 2.0]);
    assert!(flatten_window(&w, 2).is_err());
}

// ── Training loops ───────────────────────────────────────────────────────

#[test]
fn fixed_perfect_belief_matches_delay_free_training() {
    let env = PointMass1D {
        noise: 0.0,
        ..Default::default()
    };
    let trajs = generate_behavior_dataset(&env, BehaviorKind::Medium, 4, 3);
    let delay = 3;
    let cfg = TrainConfig {
        learner: small_cfg(0.99),
        delay,
        epochs: 2,
        steps_per_epoch: 20,
        belief_pretrain_steps: 0,
        belief_batch: 8,
        seed: 21,
    };
    let stepper = env.clone();
    let mut belief = BeliefModel::Fixed(Box::new(AnalyticBelief::new(1, delay, move |s: &[f64], a: &[f64]| {
        stepper.mean_step(s, a)
    })));
    let out = train_dtcorl(&trajs, &mut belief, &cfg, false, None).unwrap();

    // The same loop on true states.
    let data = DelayedData::new(&trajs, delay).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = &cfg.learner;
    let mut actor = NeuralActor::new(1, 1, l.hidden, l.actor_lr, &mut rng);
    let mut critic = NeuralCritic::new(1, 1, l.hidden, l.critic_lr, &mut rng);
    for epoch in 0..cfg.epochs {
        let mut c_sum = 0.0;
        for step in 0..cfg.steps_per_epoch {
            let picked = data.sample_tuples(l.batch_size, &mut rng);
            let batch = UpdateBatch::from_true_states(&picked).unwrap();
            c_sum += critic_update(&mut critic, &actor, &batch, l, &mut rng).unwrap();
            if (step + 1) % l.actor_freq == 0 {
                actor_update(&mut actor, &critic, &batch, l).unwrap();
            }
        }
        let got = out.metrics[epoch].critic_loss;
        let want = c_sum / cfg.steps_per_epoch as f64;
        assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "epoch {epoch}: {got} vs {want}");
    }
    for (a, b) in out.actor.params.values().iter().zip(actor.params.values()) {
        assert!((a - b).abs().max() < 1e-9);
    }
}

#[test]
fn metrics_csv_has_header_and_rows() {
    let rows = vec![EpochMetrics {
        epoch: 1,
        critic_loss: 0.5,
        actor_loss: -1.0,
        belief_loss: 0.25,
        eval_return_mean: 3.0,
        eval_return_std: 0.0,
        seed: 7,
    }];
    let mut buf = Vec::new();
    dtcorl_core::learner::train::write_metrics_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(
        text,
        "epoch,critic_loss,actor_loss,belief_loss,eval_return_mean,eval_return_std,seed\n1,0.5,-1,0.25,3,0,7\n"
    );
}
