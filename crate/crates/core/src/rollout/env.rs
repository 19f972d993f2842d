//! Continuous-interface toy environments with known dynamics.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{chain_mdp, exact_policy_iteration, sample_sparse, two_state_chain, TabularMdp, TabularPolicy, DEFAULT_TOL};

/// Stateless environment: the caller owns the state, so rollouts can be
/// replayed and shadowed exactly.
pub trait Env {
    fn name(&self) -> String;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn reset(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// `(s', r, terminal)`
    fn step(&self, s: &[f64], a: &[f64], rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, bool);
    /// Conditional mean of the next state.
    fn mean_step(&self, s: &[f64], a: &[f64]) -> Vec<f64>;
    fn is_deterministic(&self) -> bool;
    /// Near-optimal delay-free action.
    fn expert_action(&self, s: &[f64]) -> Vec<f64>;

    fn random_action(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.action_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect()
    }
}

fn clip_action(a: &[f64]) -> impl Iterator<Item = f64> + '_ {
    a.iter().map(|x| x.clamp(-1.0, 1.0))
}

/// `s' = clip(s + 0.1 a + noise, -bound, bound)`, reward `-|s'|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMass1D {
    pub noise: f64,
    pub horizon: usize,
    pub bound: f64,
    pub init_range: f64,
}

impl Default for PointMass1D {
    fn default() -> Self {
        Self {
            noise: 0.05,
            horizon: 50,
            bound: 2.0,
            init_range: 1.5,
        }
    }
}

impl PointMass1D {
    pub const DT: f64 = 0.1;

    fn advance(&self, s: f64, a: f64, eps: f64) -> f64 {
        (s + Self::DT * a.clamp(-1.0, 1.0) + eps).clamp(-self.bound, self.bound)
    }
}

impl Env for PointMass1D {
    fn name(&self) -> String {
        "pointmass1d".into()
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn reset(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![rng.random_range(-self.init_range..=self.init_range)]
    }
    fn step(&self, s: &[f64], a: &[f64], rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, bool) {
        let eps = if self.noise > 0.0 {
            self.noise * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        let next = self.advance(s[0], a[0], eps);
        (vec![next], -next.abs(), false)
    }
    /// Exact only away from the walls; the clip makes the mean nonlinear
    /// there.
    fn mean_step(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        vec![self.advance(s[0], a[0], 0.0)]
    }
    fn is_deterministic(&self) -> bool {
        self.noise == 0.0
    }
    fn expert_action(&self, s: &[f64]) -> Vec<f64> {
        vec![(-s[0] / Self::DT).clamp(-1.0, 1.0)]
    }
}

/// `s' = rho R(theta) s + 0.1 a + noise`, reward `-|s'|_2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRot2D {
    pub theta: f64,
    pub rho: f64,
    pub noise: f64,
    pub horizon: usize,
}

impl Default for LinearRot2D {
    fn default() -> Self {
        Self {
            theta: 0.2,
            rho: 0.98,
            noise: 0.02,
            horizon: 50,
        }
    }
}

impl LinearRot2D {
    fn drift(&self, s: &[f64]) -> [f64; 2] {
        let (c, si) = (self.theta.cos(), self.theta.sin());
        [self.rho * (c * s[0] - si * s[1]), self.rho * (si * s[0] + c * s[1])]
    }
}

impl Env for LinearRot2D {
    fn name(&self) -> String {
        "linrot2d".into()
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn action_dim(&self) -> usize {
        2
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn reset(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..2).map(|_| rng.random_range(-1.0..=1.0)).collect()
    }
    fn step(&self, s: &[f64], a: &[f64], rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, bool) {
        let mut next = self.mean_step(s, a);
        if self.noise > 0.0 {
            next.iter_mut()
                .for_each(|x| *x += self.noise * rng.sample::<f64, _>(StandardNormal));
        }
        let r = -(next[0] * next[0] + next[1] * next[1]).sqrt();
        (next, r, false)
    }
    fn mean_step(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let d = self.drift(s);
        d.iter().zip(clip_action(a)).map(|(x, u)| x + 0.1 * u).collect()
    }
    fn is_deterministic(&self) -> bool {
        self.noise == 0.0
    }
    fn expert_action(&self, s: &[f64]) -> Vec<f64> {
        self.drift(s).iter().map(|x| (-x / 0.1).clamp(-1.0, 1.0)).collect()
    }
}

/// A finite MDP behind a one-dimensional embedding: state `i` sits at
/// `i / (n - 1)` and the action interval `[-1, 1]` is cut into `|A|` equal
/// bins.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularEnv {
    pub mdp: TabularMdp,
    pub horizon: usize,
    label: String,
    optimal: TabularPolicy,
}

impl TabularEnv {
    pub fn new(mdp: TabularMdp, horizon: usize, label: &str) -> Result<Self> {
        let (optimal, _) = exact_policy_iteration(&mdp, DEFAULT_TOL)?;
        Ok(Self {
            mdp,
            horizon,
            label: label.into(),
            optimal,
        })
    }

    /// The stochastic chain used for belief comparisons.
    pub fn chain(n: usize, p_move: f64, horizon: usize) -> Result<Self> {
        Self::new(chain_mdp(n, p_move, 0.95)?, horizon, &format!("chain{n}"))
    }

    pub fn two_state(p_flip: f64, horizon: usize) -> Result<Self> {
        Self::new(two_state_chain(p_flip, 0.9)?, horizon, "twostate")
    }

    pub fn optimal_policy(&self) -> &TabularPolicy {
        &self.optimal
    }

    pub fn embed(&self, s: usize) -> Vec<f64> {
        let n = self.mdp.n_states();
        vec![if n > 1 { s as f64 / (n - 1) as f64 } else { 0.0 }]
    }

    pub fn decode_state(&self, x: &[f64]) -> usize {
        let n = self.mdp.n_states();
        ((x[0] * (n - 1) as f64).round().max(0.0) as usize).min(n - 1)
    }

    pub fn decode_action(&self, a: &[f64]) -> usize {
        let n = self.mdp.n_actions();
        (((a[0].clamp(-1.0, 1.0) + 1.0) / 2.0 * n as f64).floor() as usize).min(n - 1)
    }

    pub fn encode_action(&self, a: usize) -> Vec<f64> {
        let n = self.mdp.n_actions() as f64;
        vec![-1.0 + (2.0 * a as f64 + 1.0) / n]
    }
}

impl Env for TabularEnv {
    fn name(&self) -> String {
        self.label.clone()
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn reset(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = self.mdp.sample_initial(rng);
        self.embed(s)
    }
    fn step(&self, s: &[f64], a: &[f64], rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, bool) {
        let (si, ai) = (self.decode_state(s), self.decode_action(a));
        let next = sample_sparse(self.mdp.row(si, ai), rng);
        (self.embed(next), self.mdp.reward(si, ai), false)
    }
    fn mean_step(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let (si, ai) = (self.decode_state(s), self.decode_action(a));
        let m: f64 = self.mdp.row(si, ai).iter().map(|&(j, p)| p * self.embed(j)[0]).sum();
        vec![m]
    }
    fn is_deterministic(&self) -> bool {
        self.mdp.is_deterministic()
    }
    fn expert_action(&self, s: &[f64]) -> Vec<f64> {
        self.encode_action(self.optimal.mode(self.decode_state(s)))
    }
}

/// Named environments for configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    Pointmass1d,
    Linrot2d,
    Chain,
    Twostate,
}

impl EnvId {
    pub fn build(self) -> Result<Box<dyn Env>> {
        Ok(match self {
            EnvId::Pointmass1d => Box::new(PointMass1D::default()),
            EnvId::Linrot2d => Box::new(LinearRot2D::default()),
            EnvId::Chain => Box::new(TabularEnv::chain(8, 0.7, 50)?),
            EnvId::Twostate => Box::new(TabularEnv::two_state(0.2, 50)?),
        })
    }
}

impl std::str::FromStr for EnvId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointmass1d" => Ok(EnvId::Pointmass1d),
            "linrot2d" => Ok(EnvId::Linrot2d),
            "chain" => Ok(EnvId::Chain),
            "twostate" => Ok(EnvId::Twostate),
            other => Err(Error::Config(format!(
                "unknown env {other:?} (expected pointmass1d, linrot2d, chain or twostate)"
            ))),
        }
    }
}
