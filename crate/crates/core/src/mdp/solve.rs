//! Exact tabular solvers used as oracles for every delay-free value.

use super::{argmax, TabularMdp, TabularPolicy, ValueTables};
use crate::error::{Error, Result};

/// Default convergence tolerance for tabular solvers.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Iteration cap for reaching `tol`. The contraction bound is scaled by the
/// reward magnitude so large rewards do not trip the cap spuriously.
pub fn iteration_cap(gamma: f64, tol: f64, reward_scale: f64) -> usize {
    let scale = reward_scale.max(1.0);
    let n = ((tol * (1.0 - gamma) / scale).ln() / gamma.ln()).ceil();
    n.max(0.0) as usize + 64
}

/// `(T^pi V)(s) = sum_a pi(a|s) [r(s,a) + gamma sum_s' P(s'|s,a) V(s')]`
fn q_from_v(mdp: &TabularMdp, v: &[f64]) -> Vec<Vec<f64>> {
    (0..mdp.n_states())
        .map(|s| {
            (0..mdp.n_actions())
                .map(|a| {
                    let next: f64 = mdp.row(s, a).iter().map(|&(j, p)| p * v[j]).sum();
                    mdp.reward(s, a) + mdp.gamma() * next
                })
                .collect()
        })
        .collect()
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Max-norm Bellman residual of `q` under `policy`.
pub fn bellman_residual(mdp: &TabularMdp, policy: &TabularPolicy, q: &[Vec<f64>]) -> f64 {
    let v: Vec<f64> = (0..mdp.n_states()).map(|s| policy.expect(s, &q[s])).collect();
    let tq = q_from_v(mdp, &v);
    tq.iter()
        .zip(q)
        .fold(0.0, |m, (a, b)| m.max(sup_diff(a, b)))
}

/// Fixed point of the policy Bellman operator, residual at most `tol`.
pub fn exact_policy_evaluation(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    tol: f64,
) -> Result<ValueTables> {
    if !(tol > 0.0) {
        return Err(Error::InvalidMdp(format!("tolerance {tol} must be positive")));
    }
    if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
        return Err(Error::DimensionMismatch {
            expected: mdp.n_states() * mdp.n_actions(),
            got: policy.n_states() * policy.n_actions(),
        });
    }
    let gamma = mdp.gamma();
    let cap = iteration_cap(gamma, tol, mdp.max_abs_reward());
    let mut v = vec![0.0; mdp.n_states()];
    let mut residual = f64::INFINITY;
    for _ in 0..cap {
        let q = q_from_v(mdp, &v);
        let next: Vec<f64> = (0..mdp.n_states()).map(|s| policy.expect(s, &q[s])).collect();
        // The residual of q = r + gamma P v is gamma * |P (v_next - v)| <= gamma * |v_next - v|.
        residual = gamma * sup_diff(&next, &v);
        if residual <= tol {
            return Ok(ValueTables::from_q(q, policy));
        }
        v = next;
    }
    Err(Error::NoConvergence {
        iterations: cap,
        residual,
    })
}

/// Howard policy iteration from the all-zeros deterministic policy. An
/// action is switched only when it improves q by more than `tol`, ties go
/// to the lowest action id.
pub fn exact_policy_iteration(mdp: &TabularMdp, tol: f64) -> Result<(TabularPolicy, ValueTables)> {
    let n_a = mdp.n_actions();
    let mut actions = vec![0usize; mdp.n_states()];
    // Policy iteration terminates in at most |A|^|S| rounds; in practice a few.
    let max_rounds = 10_000;
    for _ in 0..max_rounds {
        let policy = TabularPolicy::deterministic(&actions, n_a);
        let values = exact_policy_evaluation(mdp, &policy, tol * 1e-2)?;
        let mut changed = false;
        for (s, act) in actions.iter_mut().enumerate() {
            let row = &values.q[s];
            let best = argmax(row);
            if row[best] > row[*act] + tol {
                *act = best;
                changed = true;
            }
        }
        if !changed {
            return Ok((policy, values));
        }
    }
    Err(Error::NoConvergence {
        iterations: max_rounds,
        residual: f64::NAN,
    })
}
