//! Deployment under observation delay: delay processes, the action
//! buffer, delayed episodes, normalized evaluation and delay-free dataset
//! generation.

pub mod delay;
pub mod env;

use std::collections::{HashMap, VecDeque};
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::{BeliefPredictor, MaskedWindow};
use crate::delayed::Transition;
use crate::error::{Error, Result};
use crate::learner::{AugmentedBc, NeuralActor};
use crate::mdp::{TabularMdp, TabularPolicy};

pub use delay::{DelayKind, DelayProcess};
pub use env::{Env, EnvId, LinearRot2D, PointMass1D, TabularEnv};

/// Ring buffer of the most recent actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionBuffer {
    capacity: usize,
    slots: VecDeque<Vec<f64>>,
}

impl ActionBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            slots: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn fill(&self) -> usize {
        self.slots.len()
    }

    pub fn push(&mut self, a: Vec<f64>) {
        if self.capacity == 0 {
            return;
        }
        if self.slots.len() == self.capacity {
            self.slots.pop_front();
        }
        self.slots.push_back(a);
    }

    /// Mask flags per slot, oldest first: slots not yet written are masked.
    pub fn masks(&self) -> Vec<bool> {
        (0..self.capacity).map(|i| i < self.capacity - self.slots.len()).collect()
    }

    /// The last `n` actions in chronological order.
    pub fn last(&self, n: usize) -> Result<Vec<Vec<f64>>> {
        if n > self.slots.len() {
            return Err(Error::WindowTooLong {
                got: n,
                max: self.slots.len(),
            });
        }
        Ok(self.slots.iter().skip(self.slots.len() - n).cloned().collect())
    }

    /// Capacity-length window ending with the last `n` actions; the front
    /// `capacity - n` slots are masked.
    pub fn window(&self, obs: Vec<f64>, n: usize, action_dim: usize) -> Result<MaskedWindow> {
        let recent = self.last(n)?;
        let n_masked = self.capacity - n;
        let mut actions = vec![vec![0.0; action_dim]; n_masked];
        actions.extend(recent);
        Ok(MaskedWindow::new(obs, actions, n_masked))
    }
}

/// Anything that maps the delayed view to an action.
pub trait DelayedPolicy {
    fn act(&self, window: &MaskedWindow) -> Result<Vec<f64>>;
}

/// A state policy fed by a belief estimate, or by the stale observation
/// when no belief is given.
pub struct BeliefAgent<'a> {
    pub belief: Option<&'a dyn BeliefPredictor>,
    pub policy: &'a dyn Fn(&[f64]) -> Vec<f64>,
}

impl BeliefAgent<'_> {
    fn estimate(&self, window: &MaskedWindow) -> Result<Vec<f64>> {
        match self.belief {
            Some(b) => Ok(b.predict(std::slice::from_ref(window))?.remove(0)),
            None => Ok(window.obs.clone()),
        }
    }
}

impl DelayedPolicy for BeliefAgent<'_> {
    fn act(&self, window: &MaskedWindow) -> Result<Vec<f64>> {
        let s = self.estimate(window)?;
        Ok((self.policy)(&s))
    }
}

/// Neural actor on the belief estimate.
pub struct ActorAgent<'a> {
    pub actor: &'a NeuralActor,
    pub belief: &'a dyn BeliefPredictor,
}

impl DelayedPolicy for ActorAgent<'_> {
    fn act(&self, window: &MaskedWindow) -> Result<Vec<f64>> {
        let s = self.belief.predict(std::slice::from_ref(window))?;
        Ok(self.actor.act(&s)?.remove(0))
    }
}

impl DelayedPolicy for AugmentedBc {
    fn act(&self, window: &MaskedWindow) -> Result<Vec<f64>> {
        Ok(AugmentedBc::act(self, std::slice::from_ref(window))?.remove(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmUp {
    Random,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub true_state: Vec<f64>,
    /// Index of the revealed observation, `None` during warm-up.
    pub observed_index: Option<usize>,
    pub observation: Option<Vec<f64>>,
    /// The window handed to the policy (None during warm-up).
    pub window: Option<MaskedWindow>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub sampled_delay: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub steps: Vec<StepRecord>,
    pub total_return: f64,
    pub normalized: Option<f64>,
}

impl EpisodeRecord {
    pub fn actions(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.action.clone()).collect()
    }
}

/// One episode under delay. At step `t` the newest observation available
/// is `s_k` with `k = max(k_prev, t - delay_t)`; the policy sees `s_k` and
/// the actions `a_k .. a_{t-1}` in a window of `max_delay` slots whose
/// front is masked. Before any observation has arrived the agent plays
/// warm-up actions.
pub fn run_delayed_episode(
    env: &dyn Env,
    policy: &dyn DelayedPolicy,
    process: &mut DelayProcess,
    warm_up: WarmUp,
    seed: u64,
) -> Result<EpisodeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delay_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let cap = process.max_delay;
    let (da, ds) = (env.action_dim(), env.state_dim());
    let mut buffer = ActionBuffer::new(cap);
    let mut history: Vec<Vec<f64>> = Vec::with_capacity(env.horizon() + 1);
    let mut s = env.reset(&mut rng);
    if s.len() != ds {
        return Err(Error::DimensionMismatch {
            expected: ds,
            got: s.len(),
        });
    }
    let mut revealed: Option<usize> = None;
    let mut steps = Vec::with_capacity(env.horizon());
    let mut total = 0.0;
    for t in 0..env.horizon() {
        history.push(s.clone());
        let delay = process.sample(&mut delay_rng);
        let candidate = t.checked_sub(delay);
        let k = match (revealed, candidate) {
            (Some(prev), Some(c)) => Some(prev.max(c)),
            (prev, c) => prev.or(c),
        };
        let (action, observed_index, observation, window) = if let Some(k) = k {
            revealed = Some(k);
            let obs = history[k].clone();
            let w = buffer.window(obs.clone(), t - k, da)?;
            let a = policy.act(&w)?;
            (a, Some(k), Some(obs), Some(w))
        } else {
            let a = match warm_up {
                WarmUp::Random => env.random_action(&mut rng),
                WarmUp::Zero => vec![0.0; da],
            };
            (a, None, None, None)
        };
        if action.len() != da {
            return Err(Error::DimensionMismatch {
                expected: da,
                got: action.len(),
            });
        }
        let (next, r, terminal) = env.step(&s, &action, &mut rng);
        buffer.push(action.clone());
        total += r;
        steps.push(StepRecord {
            true_state: s,
            observed_index,
            observation,
            window,
            action,
            reward: r,
            sampled_delay: delay,
        });
        s = next;
        if terminal {
            break;
        }
    }
    Ok(EpisodeRecord {
        steps,
        total_return: total,
        normalized: None,
    })
}

/// Reference returns for normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct References {
    pub random_score: f64,
    pub expert_score: f64,
}

pub const REFERENCE_EPISODES: usize = 100;

impl References {
    /// Uniform-random and expert policies, delay-free, 100 episodes each.
    pub fn compute(env: &dyn Env, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let random_score = mean_return(env, REFERENCE_EPISODES, seed, |_, rng_a: &mut ChaCha8Rng| {
            env.random_action(rng_a)
        })?;
        let expert_score = mean_return(env, REFERENCE_EPISODES, rng.random(), |s, _| env.expert_action(s))?;
        let refs = Self {
            random_score,
            expert_score,
        };
        refs.check()?;
        Ok(refs)
    }

    /// [`References::compute`] memoized per environment name and seed.
    pub fn cached(env: &dyn Env, seed: u64) -> Result<Self> {
        static CACHE: OnceLock<Mutex<HashMap<(String, u64), References>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let key = (env.name(), seed);
        if let Some(r) = cache.lock().expect("reference cache poisoned").get(&key) {
            return Ok(*r);
        }
        let refs = Self::compute(env, seed)?;
        cache.lock().expect("reference cache poisoned").insert(key, refs);
        Ok(refs)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.expert_score > self.random_score) {
            return Err(Error::DegenerateNormalization {
                expert: self.expert_score,
                random: self.random_score,
            });
        }
        Ok(())
    }

    pub fn normalize(&self, ret: f64) -> Result<f64> {
        self.check()?;
        Ok(100.0 * (ret - self.random_score) / (self.expert_score - self.random_score))
    }
}

fn mean_return(
    env: &dyn Env,
    episodes: usize,
    seed: u64,
    mut act: impl FnMut(&[f64], &mut ChaCha8Rng) -> Vec<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for e in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(e as u64));
        let mut s = env.reset(&mut rng);
        for _ in 0..env.horizon() {
            let a = act(&s, &mut rng);
            let (next, r, done) = env.step(&s, &a, &mut rng);
            total += r;
            s = next;
            if done {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub return_mean: f64,
    pub return_std: f64,
    pub normalized_mean: f64,
    pub normalized_std: f64,
    pub episodes: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Episodes `seed, seed + 1, ..` reduced in seed order.
pub fn evaluate(
    env: &dyn Env,
    policy: &dyn DelayedPolicy,
    process: &DelayProcess,
    n_episodes: usize,
    seed: u64,
    refs: &References,
    warm_up: WarmUp,
) -> Result<EvalSummary> {
    if n_episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut returns = Vec::with_capacity(n_episodes);
    let mut normalized = Vec::with_capacity(n_episodes);
    for e in 0..n_episodes {
        let mut p = process.clone();
        let rec = run_delayed_episode(env, policy, &mut p, warm_up, seed.wrapping_add(e as u64))?;
        normalized.push(refs.normalize(rec.total_return)?);
        returns.push(rec.total_return);
    }
    let (return_mean, return_std) = mean_std(&returns);
    let (normalized_mean, normalized_std) = mean_std(&normalized);
    Ok(EvalSummary {
        return_mean,
        return_std,
        normalized_mean,
        normalized_std,
        episodes: n_episodes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BehaviorKind {
    Expert,
    Medium,
    ReplayMix,
}

impl BehaviorKind {
    /// Exploration rate of trajectory `k` out of `n`.
    pub fn epsilon(self, k: usize, n: usize) -> f64 {
        match self {
            BehaviorKind::Expert => 0.05,
            BehaviorKind::Medium => 0.3,
            // Snapshots of an improving learner: from random towards expert.
            BehaviorKind::ReplayMix => {
                const STAGES: [f64; 4] = [1.0, 0.6, 0.3, 0.05];
                STAGES[(k * STAGES.len() / n.max(1)).min(STAGES.len() - 1)]
            }
        }
    }
}

impl std::str::FromStr for BehaviorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(BehaviorKind::Expert),
            "medium" => Ok(BehaviorKind::Medium),
            "replay-mix" => Ok(BehaviorKind::ReplayMix),
            other => Err(Error::Config(format!("unknown behavior kind {other:?}"))),
        }
    }
}

/// `K` delay-free trajectories of an epsilon-greedy expert.
pub fn generate_behavior_dataset(
    env: &dyn Env,
    kind: BehaviorKind,
    k: usize,
    seed: u64,
) -> Vec<Vec<Transition<Vec<f64>, Vec<f64>>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|i| {
            let eps = kind.epsilon(i, k);
            let mut s = env.reset(&mut rng);
            let mut traj = Vec::with_capacity(env.horizon());
            for _ in 0..env.horizon() {
                let a = if rng.random::<f64>() < eps {
                    env.random_action(&mut rng)
                } else {
                    env.expert_action(&s)
                };
                let (next, r, done) = env.step(&s, &a, &mut rng);
                traj.push(Transition {
                    s: s.clone(),
                    a,
                    r,
                    s_next: next.clone(),
                    done,
                });
                s = next;
                if done {
                    break;
                }
            }
            traj
        })
        .collect()
}

/// Tabular counterpart over `mdp` with a reference policy (its optimum when
/// `None`).
pub fn generate_tabular_dataset(
    mdp: &TabularMdp,
    reference: Option<&TabularPolicy>,
    kind: BehaviorKind,
    k: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Vec<Transition<usize, usize>>>> {
    let optimal;
    let policy = match reference {
        Some(p) => p,
        None => {
            optimal = crate::mdp::exact_policy_iteration(mdp, crate::mdp::DEFAULT_TOL)?.0;
            &optimal
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..k)
        .map(|i| {
            let eps = kind.epsilon(i, k);
            let mut s = mdp.sample_initial(&mut rng);
            (0..horizon)
                .map(|_| {
                    let a = if rng.random::<f64>() < eps {
                        rng.random_range(0..mdp.n_actions())
                    } else {
                        policy.sample(s, &mut rng)
                    };
                    let next = mdp.sample_next(s, a, &mut rng);
                    let tr = Transition {
                        s,
                        a,
                        r: mdp.reward(s, a),
                        s_next: next,
                        done: false,
                    };
                    s = next;
                    tr
                })
                .collect()
        })
        .collect())
}
