//! Finite MDPs, tabular policies and the metric spaces they live in.
//!
//! Kernels are stored as sparse rows so that augmented (delayed) MDPs with
//! up to a million enumerated states stay cheap; the JSON document form is
//! always dense.

pub mod lipschitz;
pub mod solve;
pub mod wasserstein;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use lipschitz::{estimate_lipschitz_constants, LipschitzEstimates};
pub use solve::{exact_policy_evaluation, exact_policy_iteration, DEFAULT_TOL};
pub use wasserstein::wasserstein1;

const SUM_TOL: f64 = 1e-12;

// ── Metrics ──────────────────────────────────────────────────────────────

/// Which built-in metric a finite space carries in the JSON document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Index,
    Discrete,
}

/// A metric on `{0, .., n-1}`.
#[derive(Debug, Clone, PartialEq)]
pub enum Metric {
    /// `d(i, j) = |i - j|`
    Index(usize),
    /// `d(i, j) = [i != j]`
    Discrete(usize),
    /// Explicit cost matrix, validated at construction.
    Matrix(Vec<Vec<f64>>),
    /// Additive metric on `S x A^delay`: `d_S(base) + sum_k d_A(window_k)`.
    Augmented(Box<AugmentedMetric>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedMetric {
    pub base: Metric,
    pub action: Metric,
    pub n_actions: usize,
    pub delay: usize,
}

impl Metric {
    pub fn from_kind(kind: MetricKind, n: usize) -> Self {
        match kind {
            MetricKind::Index => Metric::Index(n),
            MetricKind::Discrete => Metric::Discrete(n),
        }
    }

    /// Builds a matrix metric, checking identity, symmetry and the triangle
    /// inequality over every triple.
    pub fn matrix(d: Vec<Vec<f64>>) -> Result<Self> {
        let n = d.len();
        for (i, row) in d.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidMetric(format!("row {i} has length {}", row.len())));
            }
            if row[i] != 0.0 {
                return Err(Error::InvalidMetric(format!("d({i},{i}) = {}", row[i])));
            }
            for (j, &dij) in row.iter().enumerate() {
                if !(dij >= 0.0) || !dij.is_finite() {
                    return Err(Error::InvalidMetric(format!("d({i},{j}) = {dij}")));
                }
                if (dij - d[j][i]).abs() > 1e-12 {
                    return Err(Error::InvalidMetric(format!("d({i},{j}) != d({j},{i})")));
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if d[i][k] > d[i][j] + d[j][k] + 1e-12 {
                        return Err(Error::InvalidMetric(format!(
                            "triangle inequality fails for ({i},{j},{k})"
                        )));
                    }
                }
            }
        }
        Ok(Metric::Matrix(d))
    }

    pub fn augmented(base: Metric, action: Metric, n_actions: usize, delay: usize) -> Self {
        Metric::Augmented(Box::new(AugmentedMetric {
            base,
            action,
            n_actions,
            delay,
        }))
    }

    pub fn size(&self) -> usize {
        match self {
            Metric::Index(n) | Metric::Discrete(n) => *n,
            Metric::Matrix(d) => d.len(),
            Metric::Augmented(m) => m.base.size() * m.n_actions.pow(m.delay as u32),
        }
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        match self {
            Metric::Index(_) => (i as f64 - j as f64).abs(),
            Metric::Discrete(_) => {
                if i == j {
                    0.0
                } else {
                    1.0
                }
            }
            Metric::Matrix(d) => d[i][j],
            Metric::Augmented(m) => {
                let (bi, wi) = decode_augmented(i, m.n_actions, m.delay);
                let (bj, wj) = decode_augmented(j, m.n_actions, m.delay);
                let mut d = m.base.dist(bi, bj);
                for (ai, aj) in wi.iter().zip(&wj) {
                    d += m.action.dist(*ai, *aj);
                }
                d
            }
        }
    }

    /// Smallest positive distance between two distinct points.
    pub fn min_positive(&self) -> f64 {
        match self {
            Metric::Index(_) | Metric::Discrete(_) => 1.0,
            _ => {
                let n = self.size();
                let mut best = f64::INFINITY;
                for i in 0..n {
                    for j in 0..n {
                        let d = self.dist(i, j);
                        if d > 0.0 && d < best {
                            best = d;
                        }
                    }
                }
                best
            }
        }
    }

    pub fn kind(&self) -> Option<MetricKind> {
        match self {
            Metric::Index(_) => Some(MetricKind::Index),
            Metric::Discrete(_) => Some(MetricKind::Discrete),
            _ => None,
        }
    }
}

/// Index of an augmented state `(base, window)` with `window[0]` the most
/// significant digit.
pub fn encode_augmented(base: usize, window: &[usize], n_actions: usize) -> usize {
    window.iter().fold(base, |acc, &a| acc * n_actions + a)
}

pub fn decode_augmented(mut index: usize, n_actions: usize, delay: usize) -> (usize, Vec<usize>) {
    let mut window = vec![0; delay];
    for slot in window.iter_mut().rev() {
        *slot = index % n_actions;
        index /= n_actions;
    }
    (index, window)
}

// ── Tabular MDP ──────────────────────────────────────────────────────────

/// Sparse transition row: `(next_state, probability)` with positive mass.
pub type Row = Vec<(usize, f64)>;

/// Finite MDP `<S, A, P, r, H, gamma, rho0>` with metrics on S and A.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    rows: Vec<Row>,
    reward: Vec<f64>,
    horizon: usize,
    gamma: f64,
    rho0: Vec<f64>,
    state_metric: Metric,
    action_metric: Metric,
}

impl TabularMdp {
    /// Builds an MDP from dense kernels `transition[s][a][s']` and
    /// `reward[s][a]`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        horizon: usize,
        gamma: f64,
        rho0: Vec<f64>,
        state_metric: Metric,
        action_metric: Metric,
    ) -> Result<Self> {
        let n_states = transition.len();
        if n_states == 0 {
            return Err(Error::InvalidMdp("no states".into()));
        }
        let n_actions = transition[0].len();
        let mut rows = Vec::with_capacity(n_states * n_actions);
        for (s, per_action) in transition.iter().enumerate() {
            if per_action.len() != n_actions {
                return Err(Error::InvalidMdp(format!("state {s} has {} actions", per_action.len())));
            }
            for dense in per_action {
                if dense.len() != n_states {
                    return Err(Error::DimensionMismatch {
                        expected: n_states,
                        got: dense.len(),
                    });
                }
                rows.push(
                    dense
                        .iter()
                        .enumerate()
                        .filter(|(_, &p)| p != 0.0)
                        .map(|(j, &p)| (j, p))
                        .collect(),
                );
            }
        }
        if reward.len() != n_states || reward.iter().any(|r| r.len() != n_actions) {
            return Err(Error::InvalidMdp("reward shape does not match S x A".into()));
        }
        let reward = reward.into_iter().flatten().collect();
        Self::from_sparse(
            n_states,
            n_actions,
            rows,
            reward,
            horizon,
            gamma,
            rho0,
            state_metric,
            action_metric,
        )
    }

    /// Builds an MDP from sparse rows indexed by `s * n_actions + a`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_sparse(
        n_states: usize,
        n_actions: usize,
        rows: Vec<Row>,
        reward: Vec<f64>,
        horizon: usize,
        gamma: f64,
        rho0: Vec<f64>,
        state_metric: Metric,
        action_metric: Metric,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp("empty state or action space".into()));
        }
        if horizon == 0 {
            return Err(Error::InvalidMdp("horizon must be positive".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidMdp(format!("discount {gamma} outside (0,1)")));
        }
        if rows.len() != n_states * n_actions || reward.len() != n_states * n_actions {
            return Err(Error::InvalidMdp("kernel shape does not match S x A".into()));
        }
        for (idx, row) in rows.iter().enumerate() {
            let mut sum = 0.0;
            for &(j, p) in row {
                if j >= n_states {
                    return Err(Error::InvalidId {
                        kind: "state",
                        id: j,
                        limit: n_states,
                    });
                }
                if !(p >= 0.0) {
                    return Err(Error::InvalidMdp(format!("negative probability in row {idx}")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > SUM_TOL {
                return Err(Error::InvalidMdp(format!(
                    "row (s={}, a={}) sums to {sum}",
                    idx / n_actions,
                    idx % n_actions
                )));
            }
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidMdp("non-finite reward".into()));
        }
        check_distribution(&rho0, n_states, SUM_TOL)?;
        if state_metric.size() != n_states {
            return Err(Error::InvalidMetric(format!(
                "state metric has size {}, expected {n_states}",
                state_metric.size()
            )));
        }
        if action_metric.size() != n_actions {
            return Err(Error::InvalidMetric(format!(
                "action metric has size {}, expected {n_actions}",
                action_metric.size()
            )));
        }
        Ok(Self {
            n_states,
            n_actions,
            rows,
            reward,
            horizon,
            gamma,
            rho0,
            state_metric,
            action_metric,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn rho0(&self) -> &[f64] {
        &self.rho0
    }
    pub fn state_metric(&self) -> &Metric {
        &self.state_metric
    }
    pub fn action_metric(&self) -> &Metric {
        &self.action_metric
    }

    pub fn row(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.rows[s * self.n_actions + a]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.row(s, a)
            .iter()
            .find(|(j, _)| *j == next)
            .map_or(0.0, |&(_, p)| p)
    }

    pub fn dense_row(&self, s: usize, a: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_states];
        for &(j, p) in self.row(s, a) {
            out[j] += p;
        }
        out
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// True when every kernel row is a point mass.
    pub fn is_deterministic(&self) -> bool {
        self.rows.iter().all(|r| r.len() == 1)
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut out = self.clone();
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidMdp(format!("discount {gamma} outside (0,1)")));
        }
        out.gamma = gamma;
        Ok(out)
    }

    pub fn with_rho0(&self, rho0: Vec<f64>) -> Result<Self> {
        check_distribution(&rho0, self.n_states, SUM_TOL)?;
        let mut out = self.clone();
        out.rho0 = rho0;
        Ok(out)
    }

    pub fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.n_states {
            return Err(Error::InvalidId {
                kind: "state",
                id: s,
                limit: self.n_states,
            });
        }
        Ok(())
    }

    pub fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.n_actions {
            return Err(Error::InvalidId {
                kind: "action",
                id: a,
                limit: self.n_actions,
            });
        }
        Ok(())
    }

    /// Samples a successor of `(s, a)`.
    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        sample_sparse(self.row(s, a), rng)
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.rho0, rng)
    }

    pub fn to_document(&self) -> Result<MdpDocument> {
        let state_kind = self
            .state_metric
            .kind()
            .ok_or_else(|| Error::InvalidMetric("only index/discrete metrics serialize".into()))?;
        if self.action_metric.kind() != Some(state_kind) {
            return Err(Error::InvalidMetric(
                "state and action metrics must share a kind to serialize".into(),
            ));
        }
        Ok(MdpDocument {
            n_states: self.n_states,
            n_actions: self.n_actions,
            transition: (0..self.n_states)
                .map(|s| (0..self.n_actions).map(|a| self.dense_row(s, a)).collect())
                .collect(),
            reward: (0..self.n_states)
                .map(|s| (0..self.n_actions).map(|a| self.reward(s, a)).collect())
                .collect(),
            gamma: self.gamma,
            horizon: self.horizon,
            rho0: self.rho0.clone(),
            metric: state_kind,
        })
    }

    pub fn from_document(doc: MdpDocument) -> Result<Self> {
        if doc.transition.len() != doc.n_states {
            return Err(Error::DimensionMismatch {
                expected: doc.n_states,
                got: doc.transition.len(),
            });
        }
        if doc.transition.iter().any(|t| t.len() != doc.n_actions) {
            return Err(Error::InvalidMdp("transition shape does not match n_actions".into()));
        }
        Self::new(
            doc.transition,
            doc.reward,
            doc.horizon,
            doc.gamma,
            doc.rho0,
            Metric::from_kind(doc.metric, doc.n_states),
            Metric::from_kind(doc.metric, doc.n_actions),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document()?)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }
}

/// JSON form of a [`TabularMdp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
    pub horizon: usize,
    pub rho0: Vec<f64>,
    pub metric: MetricKind,
}

pub fn check_distribution(p: &[f64], n: usize, tol: f64) -> Result<()> {
    if p.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: p.len(),
        });
    }
    if p.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::NotADistribution(f64::NAN));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::NotADistribution(sum));
    }
    Ok(())
}

pub fn sample_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // roundoff: last atom with positive mass
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

pub fn sample_sparse<R: Rng + ?Sized>(row: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(j, p) in row {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.last().map(|&(j, _)| j).unwrap_or(0)
}

/// Dirichlet(1, .., 1) sample.
pub fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let sum: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= sum);
    v
}

// ── Policies and values ──────────────────────────────────────────────────

/// Stochastic policy `pi(a|s)` over a finite space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        let n_actions = probs.first().map_or(0, Vec::len);
        if n_actions == 0 {
            return Err(Error::InvalidPolicy("empty policy".into()));
        }
        for (s, row) in probs.iter().enumerate() {
            check_distribution(row, n_actions, SUM_TOL)
                .map_err(|e| Error::InvalidPolicy(format!("row {s}: {e}")))?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        Self {
            probs: actions
                .iter()
                .map(|&a| {
                    let mut row = vec![0.0; n_actions];
                    row[a] = 1.0;
                    row
                })
                .collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        Self {
            probs: (0..n_states).map(|_| random_simplex(n_actions, rng)).collect(),
        }
    }

    /// Greedy policy w.r.t. `q`, ties to the lowest action id.
    pub fn greedy(q: &[Vec<f64>]) -> Self {
        let n_actions = q.first().map_or(0, Vec::len);
        let actions: Vec<usize> = q.iter().map(|row| argmax(row)).collect();
        Self::deterministic(&actions, n_actions)
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }
    pub fn n_actions(&self) -> usize {
        self.probs[0].len()
    }
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s]
    }
    pub fn rows(&self) -> &[Vec<f64>] {
        &self.probs
    }

    /// Mixture `p_i` -> action id, for deterministic rows.
    pub fn mode(&self, s: usize) -> usize {
        argmax(&self.probs[s])
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_index(&self.probs[s], rng)
    }

    /// `sum_a pi(a|s) f(a)`
    pub fn expect(&self, s: usize, f: &[f64]) -> f64 {
        self.probs[s].iter().zip(f).map(|(p, x)| p * x).sum()
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTables {
    pub q: Vec<Vec<f64>>,
    pub v: Vec<f64>,
}

impl ValueTables {
    pub fn from_q(q: Vec<Vec<f64>>, policy: &TabularPolicy) -> Self {
        let v = q
            .iter()
            .enumerate()
            .map(|(s, row)| policy.expect(s, row))
            .collect();
        Self { q, v }
    }

    /// `sum_s rho(s) v(s)`
    pub fn expected_value(&self, rho: &[f64]) -> f64 {
        rho.iter().zip(&self.v).map(|(p, v)| p * v).sum()
    }
}

// ── Instances ────────────────────────────────────────────────────────────

/// Two-state chain: action 0 stays, action 1 flips with probability
/// `p_flip`; reward 1 in state 1.
pub fn two_state_chain(p_flip: f64, gamma: f64) -> Result<TabularMdp> {
    let transition = vec![
        vec![vec![1.0, 0.0], vec![1.0 - p_flip, p_flip]],
        vec![vec![0.0, 1.0], vec![p_flip, 1.0 - p_flip]],
    ];
    let reward = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
    TabularMdp::new(
        transition,
        reward,
        100,
        gamma,
        vec![1.0, 0.0],
        Metric::Index(2),
        Metric::Index(2),
    )
}

/// `n`-state chain on a line: action 0 moves left, action 1 moves right,
/// each succeeding with probability `p_move` (walls reflect into a stay).
/// Reward 1 in the rightmost state.
pub fn chain_mdp(n: usize, p_move: f64, gamma: f64) -> Result<TabularMdp> {
    let mut transition = vec![vec![vec![0.0; n]; 2]; n];
    for s in 0..n {
        let left = s.saturating_sub(1);
        let right = (s + 1).min(n - 1);
        transition[s][0][left] += p_move;
        transition[s][0][s] += 1.0 - p_move;
        transition[s][1][right] += p_move;
        transition[s][1][s] += 1.0 - p_move;
    }
    let reward = (0..n)
        .map(|s| vec![if s == n - 1 { 1.0 } else { 0.0 }; 2])
        .collect();
    let mut rho0 = vec![0.0; n];
    rho0[0] = 1.0;
    TabularMdp::new(
        transition,
        reward,
        100,
        gamma,
        rho0,
        Metric::Index(n),
        Metric::Index(2),
    )
}

/// Random MDP with Dirichlet(1) kernel rows, U(0,1) rewards and uniform
/// initial distribution.
pub fn random_mdp<R: Rng + ?Sized>(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<TabularMdp> {
    let transition = (0..n_states)
        .map(|_| (0..n_actions).map(|_| random_simplex(n_states, rng)).collect())
        .collect();
    let reward = (0..n_states)
        .map(|_| (0..n_actions).map(|_| rng.random::<f64>()).collect())
        .collect();
    TabularMdp::new(
        transition,
        reward,
        100,
        gamma,
        vec![1.0 / n_states as f64; n_states],
        Metric::Index(n_states),
        Metric::Index(n_actions),
    )
}

/// Random deterministic MDP. Action 0 is a cyclic shift so that every state
/// stays reachable in any number of steps.
pub fn random_deterministic_mdp<R: Rng + ?Sized>(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<TabularMdp> {
    let transition = (0..n_states)
        .map(|s| {
            (0..n_actions)
                .map(|a| {
                    let next = if a == 0 {
                        (s + 1) % n_states
                    } else {
                        rng.random_range(0..n_states)
                    };
                    let mut row = vec![0.0; n_states];
                    row[next] = 1.0;
                    row
                })
                .collect()
        })
        .collect();
    let reward = (0..n_states)
        .map(|_| (0..n_actions).map(|_| rng.random::<f64>()).collect())
        .collect();
    TabularMdp::new(
        transition,
        reward,
        100,
        gamma,
        vec![1.0 / n_states as f64; n_states],
        Metric::Index(n_states),
        Metric::Index(n_actions),
    )
}
