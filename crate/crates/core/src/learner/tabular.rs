//! Exact belief-based policy evaluation and improvement on finite MDPs.
//!
//! Q lives on base states. The W1 behavior penalty of a base state `s` is
//! the posterior average over augmented states of `W1(pi(.|s), mu(.|x))`,
//! with posterior weight proportional to `d(x) b(s|x)`. When each `x`
//! pins down a single state this is the least-squares solution of the
//! belief-weighted fixed point; in general it is the state-separable
//! surrogate under which improvement is monotone.

use serde::{Deserialize, Serialize};

use super::LearnerConfig;
use crate::delayed::{all_beliefs, augmented_size, push_forward, AugmentedTuple, BeliefDistribution};
use crate::error::{Error, Result};
use crate::mdp::{exact_policy_evaluation, wasserstein1, TabularMdp, TabularPolicy, ValueTables};

/// Grids with more points than this are refused.
pub const MAX_GRID_POINTS: usize = 200_000;

/// Augmented states under consideration, their exact beliefs and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefContext {
    pub delay: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub beliefs: Vec<BeliefDistribution>,
    /// Sampling weight `d(x)`; zero for augmented states not in the set.
    pub weights: Vec<f64>,
    /// Per base state, `(x, w(x|s))` normalized to sum to one.
    posterior: Vec<Vec<(usize, f64)>>,
}

impl BeliefContext {
    pub fn new(mdp: &TabularMdp, delay: usize, weights: Vec<f64>) -> Result<Self> {
        let beliefs = all_beliefs(mdp, delay)?;
        if weights.len() != beliefs.len() {
            return Err(Error::DimensionMismatch {
                expected: beliefs.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("sample weights must be nonnegative".into()));
        }
        let n_s = mdp.n_states();
        let mut posterior: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_s];
        for (x, (b, &w)) in beliefs.iter().zip(&weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            for (s, p) in b.support() {
                posterior[s].push((x, w * p));
            }
        }
        for row in &mut posterior {
            let total: f64 = row.iter().map(|(_, w)| w).sum();
            row.iter_mut().for_each(|(_, w)| *w /= total);
        }
        Ok(Self {
            delay,
            n_states: n_s,
            n_actions: mdp.n_actions(),
            beliefs,
            weights,
            posterior,
        })
    }

    /// Every augmented state with unit weight.
    pub fn enumerate(mdp: &TabularMdp, delay: usize) -> Result<Self> {
        let n_x = augmented_size(mdp, delay)?;
        Self::new(mdp, delay, vec![1.0; n_x])
    }

    /// Weights are visit counts of the observed augmented states.
    pub fn from_tuples(mdp: &TabularMdp, delay: usize, tuples: &[AugmentedTuple<usize, usize>]) -> Result<Self> {
        if tuples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n_x = augmented_size(mdp, delay)?;
        let n_a = mdp.n_actions();
        let mut weights = vec![0.0; n_x];
        for t in tuples {
            if t.x.delay() != delay {
                return Err(Error::DimensionMismatch {
                    expected: delay,
                    got: t.x.delay(),
                });
            }
            weights[t.x.index(n_a)] += 1.0;
        }
        Self::new(mdp, delay, weights)
    }

    pub fn n_augmented(&self) -> usize {
        self.beliefs.len()
    }

    pub fn posterior(&self, s: usize) -> &[(usize, f64)] {
        &self.posterior[s]
    }

    pub fn is_supported(&self, s: usize) -> bool {
        !self.posterior[s].is_empty()
    }

    pub fn uncovered(&self) -> Vec<usize> {
        (0..self.n_states).filter(|&s| !self.is_supported(s)).collect()
    }

    fn check_dims(&self, mdp: &TabularMdp) -> Result<()> {
        if mdp.n_states() != self.n_states || mdp.n_actions() != self.n_actions {
            return Err(Error::DimensionMismatch {
                expected: self.n_states * self.n_actions,
                got: mdp.n_states() * mdp.n_actions(),
            });
        }
        Ok(())
    }
}

/// Behavior policy over augmented states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorModel {
    pub probs: Vec<Vec<f64>>,
}

impl BehaviorModel {
    /// `mu(a|x) = sum_s b(s|x) mu(a|s)`
    pub fn lifted(ctx: &BeliefContext, policy: &TabularPolicy) -> Result<Self> {
        if policy.n_states() != ctx.n_states || policy.n_actions() != ctx.n_actions {
            return Err(Error::DimensionMismatch {
                expected: ctx.n_states * ctx.n_actions,
                got: policy.n_states() * policy.n_actions(),
            });
        }
        let probs = ctx
            .beliefs
            .iter()
            .map(|b| {
                let mut row: Vec<f64> = (0..ctx.n_actions).map(|a| b.expect(|s| policy.row(s)[a])).collect();
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= total);
                row
            })
            .collect();
        Ok(Self { probs })
    }

    /// Conditional action frequencies per augmented state with additive
    /// smoothing; unvisited states get the uniform distribution.
    pub fn from_tuples(
        n_augmented: usize,
        n_actions: usize,
        tuples: &[AugmentedTuple<usize, usize>],
        smoothing: f64,
    ) -> Result<Self> {
        let mut counts = vec![vec![smoothing; n_actions]; n_augmented];
        for t in tuples {
            let x = t.x.index(n_actions);
            if x >= n_augmented {
                return Err(Error::InvalidId {
                    kind: "augmented state",
                    id: x,
                    limit: n_augmented,
                });
            }
            if t.a >= n_actions {
                return Err(Error::InvalidId {
                    kind: "action",
                    id: t.a,
                    limit: n_actions,
                });
            }
            counts[x][t.a] += 1.0;
        }
        for row in &mut counts {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|p| *p /= total);
            } else {
                row.iter_mut().for_each(|p| *p = 1.0 / n_actions as f64);
            }
        }
        Ok(Self { probs: counts })
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.probs[x]
    }
}

/// Posterior-averaged `W1(p, mu(.|x))` at base state `s`.
pub fn state_penalty(mdp: &TabularMdp, ctx: &BeliefContext, mu: &BehaviorModel, s: usize, p: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for &(x, w) in ctx.posterior(s) {
        total += w * wasserstein1(p, mu.row(x), mdp.action_metric())?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpeResult {
    /// Penalized Q; `sum_a pi(a|s) q[s][a]` is the penalized state value.
    pub values: ValueTables,
    pub penalty: Vec<f64>,
    /// Weighted RMS residual of the belief-weighted fixed-point equations
    /// over the sample set.
    pub belief_residual: f64,
}

/// Belief-based policy evaluation.
pub fn tabular_bpe(
    mdp: &TabularMdp,
    ctx: &BeliefContext,
    policy: &TabularPolicy,
    mu: &BehaviorModel,
    cfg: &LearnerConfig,
) -> Result<BpeResult> {
    ctx.check_dims(mdp)?;
    let uncovered = ctx.uncovered();
    if !uncovered.is_empty() {
        return Err(Error::RankDeficient { uncovered });
    }
    let lambda = cfg.critic_penalty();
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    let penalty: Vec<f64> = (0..n_s)
        .map(|s| {
            if lambda == 0.0 {
                Ok(0.0)
            } else {
                state_penalty(mdp, ctx, mu, s, policy.row(s))
            }
        })
        .collect::<Result<_>>()?;
    let shaped = if lambda == 0.0 {
        mdp.clone()
    } else {
        let rows = (0..n_s * n_a).map(|k| mdp.row(k / n_a, k % n_a).to_vec()).collect();
        let reward = (0..n_s * n_a)
            .map(|k| mdp.reward(k / n_a, k % n_a) - lambda * penalty[k / n_a])
            .collect();
        TabularMdp::from_sparse(
            n_s,
            n_a,
            rows,
            reward,
            mdp.horizon(),
            mdp.gamma(),
            mdp.rho0().to_vec(),
            mdp.state_metric().clone(),
            mdp.action_metric().clone(),
        )?
    };
    let values = exact_policy_evaluation(&shaped, policy, cfg.tol * 1e-2)?;
    let belief_residual = belief_residual(mdp, ctx, policy, mu, &values, lambda)?;
    Ok(BpeResult {
        values,
        penalty,
        belief_residual,
    })
}

/// Residual of `E_b Q(s,a) = E_b r(s,a) + gamma E_{b'} V(s') - lambda E_b W1(pi(.|s), mu(.|x))`.
fn belief_residual(
    mdp: &TabularMdp,
    ctx: &BeliefContext,
    policy: &TabularPolicy,
    mu: &BehaviorModel,
    values: &ValueTables,
    lambda: f64,
) -> Result<f64> {
    let v = &values.v;
    let mut sq = 0.0;
    let mut weight = 0.0;
    for (x, (b, &w)) in ctx.beliefs.iter().zip(&ctx.weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let mut pen = 0.0;
        if lambda > 0.0 {
            for (s, p) in b.support() {
                pen += p * wasserstein1(policy.row(s), mu.row(x), mdp.action_metric())?;
            }
        }
        for a in 0..mdp.n_actions() {
            let lhs = b.expect(|s| values.q[s][a]);
            let next = push_forward(mdp, b.probs(), a);
            let future: f64 = next.iter().zip(v).map(|(p, v)| p * v).sum();
            let rhs = b.expect(|s| mdp.reward(s, a)) + mdp.gamma() * future - lambda * pen;
            sq += w * (lhs - rhs).powi(2);
            weight += w;
        }
    }
    Ok((sq / weight).sqrt())
}

/// Compositions of `resolution` into `n` parts, scaled to the simplex, in
/// lexicographically descending order (mass on low action ids first).
pub fn simplex_grid(n: usize, resolution: usize) -> Result<Vec<Vec<f64>>> {
    let count = binomial(resolution + n - 1, n - 1);
    if count > MAX_GRID_POINTS as u128 {
        return Err(Error::Config(format!(
            "simplex grid with {count} points exceeds the limit {MAX_GRID_POINTS}"
        )));
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut parts = vec![0usize; n];
    fn rec(i: usize, left: usize, parts: &mut Vec<usize>, res: usize, out: &mut Vec<Vec<f64>>) {
        if i + 1 == parts.len() {
            parts[i] = left;
            out.push(parts.iter().map(|&k| k as f64 / res as f64).collect());
            return;
        }
        for k in (0..=left).rev() {
            parts[i] = k;
            rec(i + 1, left - k, parts, res, out);
        }
    }
    rec(0, resolution, &mut parts, resolution, &mut out);
    Ok(out)
}

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Belief-based policy improvement. Unsupported states keep their row;
/// a supported row changes only if the best candidate beats it by more
/// than `cfg.tol`.
pub fn tabular_bpi(
    mdp: &TabularMdp,
    ctx: &BeliefContext,
    q: &[Vec<f64>],
    mu: &BehaviorModel,
    current: &TabularPolicy,
    cfg: &LearnerConfig,
) -> Result<TabularPolicy> {
    ctx.check_dims(mdp)?;
    if (0..ctx.n_states).all(|s| !ctx.is_supported(s)) {
        return Err(Error::EmptySupport);
    }
    let lambda = cfg.actor_penalty();
    let n_a = mdp.n_actions();
    let grid = if lambda > 0.0 {
        simplex_grid(n_a, cfg.grid_resolution)?
    } else {
        (0..n_a)
            .map(|a| {
                let mut p = vec![0.0; n_a];
                p[a] = 1.0;
                p
            })
            .collect()
    };
    let mut rows = current.rows().to_vec();
    for (s, row) in rows.iter_mut().enumerate() {
        if !ctx.is_supported(s) {
            continue;
        }
        let objective = |p: &[f64]| -> Result<f64> {
            let gain: f64 = p.iter().zip(&q[s]).map(|(a, b)| a * b).sum();
            if lambda == 0.0 {
                Ok(gain)
            } else {
                Ok(gain - lambda * state_penalty(mdp, ctx, mu, s, p)?)
            }
        };
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (i, p) in grid.iter().enumerate() {
            let v = objective(p)?;
            if v > best_val {
                best = i;
                best_val = v;
            }
        }
        if best_val > objective(row)? + cfg.tol {
            *row = grid[best].clone();
        }
    }
    TabularPolicy::new(rows)
}

/// Alternates evaluation and improvement from the all-zero deterministic
/// policy until the policy stops changing or `max_iters` is reached.
pub fn belief_policy_iteration(
    mdp: &TabularMdp,
    ctx: &BeliefContext,
    mu: &BehaviorModel,
    cfg: &LearnerConfig,
    max_iters: usize,
) -> Result<(TabularPolicy, BpeResult)> {
    let mut policy = TabularPolicy::deterministic(&vec![0; mdp.n_states()], mdp.n_actions());
    let mut eval = tabular_bpe(mdp, ctx, &policy, mu, cfg)?;
    for _ in 0..max_iters {
        let next = tabular_bpi(mdp, ctx, &eval.values.q, mu, &policy, cfg)?;
        if next == policy {
            break;
        }
        policy = next;
        eval = tabular_bpe(mdp, ctx, &policy, mu, cfg)?;
    }
    Ok((policy, eval))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub iteration: usize,
    pub state: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneReport {
    /// `trace[k][s] = E_{a~pi_k} Q^{pi_k}(s, a)`; entry 0 is the start.
    pub trace: Vec<Vec<f64>>,
    pub violations: Vec<Violation>,
    /// Smallest `after - before` over supported states and iterations.
    pub min_slack: f64,
    pub policies: Vec<TabularPolicy>,
}

pub const MONOTONE_SLACK: f64 = -1e-8;

/// Runs `n_iters` rounds of evaluation and improvement and checks that the
/// expected Q of every supported state never drops. The behavior policy
/// defaults to the lift of the uniform policy.
pub fn check_monotone_improvement(
    mdp: &TabularMdp,
    delay: usize,
    cfg: &LearnerConfig,
    n_iters: usize,
    mu: Option<&BehaviorModel>,
) -> Result<MonotoneReport> {
    let ctx = BeliefContext::enumerate(mdp, delay)?;
    let uniform;
    let mu = match mu {
        Some(m) => m,
        None => {
            uniform = BehaviorModel::lifted(&ctx, &TabularPolicy::uniform(mdp.n_states(), mdp.n_actions()))?;
            &uniform
        }
    };
    let mut policy = TabularPolicy::deterministic(&vec![0; mdp.n_states()], mdp.n_actions());
    let mut eval = tabular_bpe(mdp, &ctx, &policy, mu, cfg)?;
    let mut trace = vec![eval.values.v.clone()];
    let mut policies = vec![policy.clone()];
    let mut violations = Vec::new();
    let mut min_slack = f64::INFINITY;
    for it in 1..=n_iters {
        policy = tabular_bpi(mdp, &ctx, &eval.values.q, mu, &policy, cfg)?;
        eval = tabular_bpe(mdp, &ctx, &policy, mu, cfg)?;
        let prev = trace.last().expect("non-empty");
        for s in (0..mdp.n_states()).filter(|&s| ctx.is_supported(s)) {
            let slack = eval.values.v[s] - prev[s];
            min_slack = min_slack.min(slack);
            if slack < MONOTONE_SLACK {
                violations.push(Violation {
                    iteration: it,
                    state: s,
                    before: prev[s],
                    after: eval.values.v[s],
                });
            }
        }
        trace.push(eval.values.v.clone());
        policies.push(policy.clone());
    }
    Ok(MonotoneReport {
        trace,
        violations,
        min_slack,
        policies,
    })
}
