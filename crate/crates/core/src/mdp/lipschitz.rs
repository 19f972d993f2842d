//! Lipschitz constants by exhaustive pairwise enumeration.

use serde::{Deserialize, Serialize};

use super::{wasserstein1, TabularMdp, TabularPolicy, ValueTables};
use crate::error::{Error, Result};

/// Upper limit on states and actions for exhaustive enumeration.
pub const MAX_ENUMERATED: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimates {
    pub l_p: f64,
    pub l_r: f64,
    pub l_pi: f64,
    /// Infinite unless `contraction_ok`.
    pub l_q: f64,
    /// The measured ratio maximum for q, finite regardless of contraction.
    pub l_q_empirical: f64,
    pub contraction_ok: bool,
}

/// Maximum of `num(i, j) / den(i, j)` over pairs with positive denominator.
pub fn max_ratio(
    n: usize,
    mut num: impl FnMut(usize, usize) -> Result<f64>,
    den: impl Fn(usize, usize) -> f64,
) -> Result<f64> {
    let mut best: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = den(i, j);
            if d > 0.0 {
                best = best.max(num(i, j)? / d);
            }
        }
    }
    Ok(best)
}

pub fn estimate_lipschitz_constants(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    values: &ValueTables,
) -> Result<LipschitzEstimates> {
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    if n_s > MAX_ENUMERATED || n_a > MAX_ENUMERATED {
        return Err(Error::InvalidMdp(format!(
            "{n_s} states x {n_a} actions exceeds exhaustive enumeration limit {MAX_ENUMERATED}"
        )));
    }
    let pair = |k: usize| (k / n_a, k % n_a);
    let den = |i: usize, j: usize| {
        let ((s1, a1), (s2, a2)) = (pair(i), pair(j));
        mdp.state_metric().dist(s1, s2) + mdp.action_metric().dist(a1, a2)
    };
    let rows: Vec<Vec<f64>> = (0..n_s * n_a)
        .map(|k| {
            let (s, a) = pair(k);
            mdp.dense_row(s, a)
        })
        .collect();
    let l_p = max_ratio(
        n_s * n_a,
        |i, j| wasserstein1(&rows[i], &rows[j], mdp.state_metric()),
        den,
    )?;
    let l_r = max_ratio(
        n_s * n_a,
        |i, j| {
            let ((s1, a1), (s2, a2)) = (pair(i), pair(j));
            Ok((mdp.reward(s1, a1) - mdp.reward(s2, a2)).abs())
        },
        den,
    )?;
    let l_pi = max_ratio(
        n_s,
        |i, j| wasserstein1(policy.row(i), policy.row(j), mdp.action_metric()),
        |i, j| mdp.state_metric().dist(i, j),
    )?;
    let l_q_empirical = max_ratio(
        n_s * n_a,
        |i, j| {
            let ((s1, a1), (s2, a2)) = (pair(i), pair(j));
            Ok((values.q[s1][a1] - values.q[s2][a2]).abs())
        },
        den,
    )?;
    let contraction_ok = mdp.gamma() * l_p * (1.0 + l_pi) < 1.0;
    Ok(LipschitzEstimates {
        l_p,
        l_r,
        l_pi,
        l_q: if contraction_ok {
            l_q_empirical
        } else {
            f64::INFINITY
        },
        l_q_empirical,
        contraction_ok,
    })
}
