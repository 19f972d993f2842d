//! Augmented delayed MDPs: exact beliefs, delayed rewards and kernels, and
//! conversion of delay-free trajectories into augmented training tuples.

pub mod io;

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    check_distribution, decode_augmented, encode_augmented, sample_index, Metric, Row, TabularMdp,
    TabularPolicy,
};

/// Largest enumerable augmented space.
pub const ENUMERATION_BUDGET: u128 = 1_000_000;

/// `x = (s_{t-delay}, a_{t-delay}, .., a_{t-1})`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugmentedState<S, A> {
    pub base: S,
    pub window: Vec<A>,
}

pub type TabularAugmented = AugmentedState<usize, usize>;

impl<S: Clone, A: Clone> AugmentedState<S, A> {
    pub fn new(base: S, window: Vec<A>) -> Self {
        Self { base, window }
    }

    /// Degenerate augmented state with an empty window.
    pub fn plain(base: S) -> Self {
        Self {
            base,
            window: Vec::new(),
        }
    }

    pub fn delay(&self) -> usize {
        self.window.len()
    }

    /// Window after acting `a`: drop the oldest action, append `a`.
    pub fn shifted_window(&self, a: A) -> Vec<A> {
        let mut w: Vec<A> = self.window.iter().skip(1).cloned().collect();
        if !self.window.is_empty() {
            w.push(a);
        }
        w
    }
}

impl TabularAugmented {
    pub fn index(&self, n_actions: usize) -> usize {
        encode_augmented(self.base, &self.window, n_actions)
    }

    pub fn from_index(index: usize, n_actions: usize, delay: usize) -> Self {
        let (base, window) = decode_augmented(index, n_actions, delay);
        Self { base, window }
    }
}

/// Belief `b(s|x)` over a finite state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefDistribution {
    probs: Vec<f64>,
}

impl BeliefDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_distribution(&probs, probs.len(), 1e-12)?;
        Ok(Self { probs })
    }

    pub fn point(s: usize, n_states: usize) -> Self {
        let mut probs = vec![0.0; n_states];
        probs[s] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.probs.iter().cloned().enumerate().filter(|(_, p)| *p > 0.0)
    }

    pub fn is_point_mass(&self) -> bool {
        self.support().count() == 1
    }

    /// `sum_s b(s) f(s)`
    pub fn expect(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.support().map(|(s, p)| p * f(s)).sum()
    }
}

fn check_window(mdp: &TabularMdp, x: &TabularAugmented) -> Result<()> {
    mdp.check_state(x.base)?;
    x.window.iter().try_for_each(|&a| mdp.check_action(a))
}

/// One pushforward step `b'(s') = sum_s b(s) P(s'|s,a)`.
pub fn push_forward(mdp: &TabularMdp, b: &[f64], a: usize) -> Vec<f64> {
    let mut out = vec![0.0; mdp.n_states()];
    for (s, &p) in b.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for &(j, q) in mdp.row(s, a) {
            out[j] += p * q;
        }
    }
    out
}

/// `delta_{base}` pushed through the kernels of the window actions in order.
pub fn exact_belief(mdp: &TabularMdp, x: &TabularAugmented) -> Result<BeliefDistribution> {
    check_window(mdp, x)?;
    let mut b = BeliefDistribution::point(x.base, mdp.n_states()).probs;
    for &a in &x.window {
        b = push_forward(mdp, &b, a);
    }
    Ok(BeliefDistribution { probs: b })
}

/// Beliefs after each prefix of the window: `b_1, .., b_delay` (intermediate
/// state marginals `s_{t-delay+1}, .., s_t`).
pub fn belief_trajectory(mdp: &TabularMdp, x: &TabularAugmented) -> Result<Vec<Vec<f64>>> {
    check_window(mdp, x)?;
    let mut b = BeliefDistribution::point(x.base, mdp.n_states()).probs;
    let mut out = Vec::with_capacity(x.window.len());
    for &a in &x.window {
        b = push_forward(mdp, &b, a);
        out.push(b.clone());
    }
    Ok(out)
}

/// `r_delay(x, a) = sum_s b(s|x) r(s, a)`
pub fn delayed_reward(mdp: &TabularMdp, x: &TabularAugmented, a: usize) -> Result<f64> {
    mdp.check_action(a)?;
    let b = exact_belief(mdp, x)?;
    Ok(b.expect(|s| mdp.reward(s, a)))
}

/// Successor distribution of the augmented state.
pub fn delayed_transition(
    mdp: &TabularMdp,
    x: &TabularAugmented,
    a: usize,
) -> Result<Vec<(TabularAugmented, f64)>> {
    check_window(mdp, x)?;
    mdp.check_action(a)?;
    let oldest = x.window.first().copied().unwrap_or(a);
    let window = x.shifted_window(a);
    Ok(mdp
        .row(x.base, oldest)
        .iter()
        .map(|&(j, p)| (AugmentedState::new(j, window.clone()), p))
        .collect())
}

/// Number of augmented states, checked against the enumeration budget.
pub fn augmented_size(mdp: &TabularMdp, delay: usize) -> Result<usize> {
    let size = (mdp.n_actions() as u128)
        .checked_pow(delay as u32)
        .and_then(|w| w.checked_mul(mdp.n_states() as u128))
        .unwrap_or(u128::MAX);
    if size > ENUMERATION_BUDGET {
        return Err(Error::EnumerationBudget(size));
    }
    Ok(size as usize)
}

/// Enumerated delayed MDP over `S x A^delay`. The initial distribution puts
/// `rho0` mass on windows filled with `initial_action`.
pub fn build_augmented_mdp(mdp: &TabularMdp, delay: usize, initial_action: usize) -> Result<TabularMdp> {
    if delay == 0 {
        return Ok(mdp.clone());
    }
    mdp.check_action(initial_action)?;
    let n_x = augmented_size(mdp, delay)?;
    let n_a = mdp.n_actions();
    let mut rows: Vec<Row> = Vec::with_capacity(n_x * n_a);
    let mut reward = Vec::with_capacity(n_x * n_a);
    for idx in 0..n_x {
        let x = TabularAugmented::from_index(idx, n_a, delay);
        let b = exact_belief(mdp, &x)?;
        for a in 0..n_a {
            let next_window = x.shifted_window(a);
            rows.push(
                mdp.row(x.base, x.window[0])
                    .iter()
                    .map(|&(j, p)| (encode_augmented(j, &next_window, n_a), p))
                    .collect(),
            );
            reward.push(b.expect(|s| mdp.reward(s, a)));
        }
    }
    let mut rho = vec![0.0; n_x];
    let pad = vec![initial_action; delay];
    for (s, &p) in mdp.rho0().iter().enumerate() {
        rho[encode_augmented(s, &pad, n_a)] += p;
    }
    let metric = Metric::augmented(mdp.state_metric().clone(), mdp.action_metric().clone(), n_a, delay);
    TabularMdp::from_sparse(
        n_x,
        n_a,
        rows,
        reward,
        mdp.horizon(),
        mdp.gamma(),
        rho,
        metric,
        mdp.action_metric().clone(),
    )
}

/// Exact beliefs for every enumerated augmented state.
pub fn all_beliefs(mdp: &TabularMdp, delay: usize) -> Result<Vec<BeliefDistribution>> {
    let n_x = augmented_size(mdp, delay)?;
    (0..n_x)
        .map(|idx| exact_belief(mdp, &TabularAugmented::from_index(idx, mdp.n_actions(), delay)))
        .collect()
}

/// Lifted policy `pi_delay(a|x) = sum_s b(s|x) pi(a|s)`.
pub fn lift_policy(mdp: &TabularMdp, policy: &TabularPolicy, delay: usize) -> Result<TabularPolicy> {
    let beliefs = all_beliefs(mdp, delay)?;
    let n_a = mdp.n_actions();
    TabularPolicy::new(
        beliefs
            .iter()
            .map(|b| {
                (0..n_a)
                    .map(|a| b.expect(|s| policy.row(s)[a]))
                    .collect::<Vec<f64>>()
            })
            .map(|mut row| {
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= sum);
                row
            })
            .collect(),
    )
}

/// Occupancy-free reachability: augmented states reachable from the support
/// of `rho` under any action sequence.
pub fn reachable(aug: &TabularMdp) -> Vec<bool> {
    let mut seen = vec![false; aug.n_states()];
    let mut stack: Vec<usize> = aug
        .rho0()
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > 0.0)
        .map(|(i, _)| i)
        .collect();
    for &i in &stack {
        seen[i] = true;
    }
    while let Some(x) = stack.pop() {
        for a in 0..aug.n_actions() {
            for &(j, _) in aug.row(x, a) {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    seen
}

// ── Trajectories and tuples ──────────────────────────────────────────────

/// Delay-free transition `(s, a, r, s')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition<S, A> {
    pub s: S,
    pub a: A,
    pub r: f64,
    pub s_next: S,
    pub done: bool,
}

/// Learner sample built from a delay-free trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedTuple<S, A> {
    pub x: AugmentedState<S, A>,
    pub a: A,
    /// Delay-free reward `r(s_t, a_t)` read from data.
    pub r: f64,
    pub x_next: AugmentedState<S, A>,
    /// `s_t`, the belief label.
    pub true_state: S,
    /// `s_{t-delay+1}, .., s_t`; the last entry equals `true_state`.
    pub intermediate: Vec<S>,
    /// `s_{t+1}`
    pub next_true_state: S,
    /// Rewards paid along the window, `r_{t-delay}, .., r_{t-1}`.
    pub window_rewards: Vec<f64>,
    pub done: bool,
}

/// Belief-training sample. The first `n_masked` window slots are padding
/// and carry no information; `labels` cover the unmasked positions only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSample<S, A> {
    pub base: S,
    pub window: Vec<A>,
    pub n_masked: usize,
    pub labels: Vec<S>,
}

/// Emits `T - delay` learner tuples; tuple `i` observes `s_i` and acts at
/// `i + delay`.
pub fn augment_trajectory<S: Clone, A: Clone>(
    traj: &[Transition<S, A>],
    delay: usize,
) -> Vec<AugmentedTuple<S, A>> {
    if traj.len() < delay + 1 {
        return Vec::new();
    }
    (0..traj.len() - delay)
        .map(|i| {
            let t = i + delay;
            let window: Vec<A> = traj[i..t].iter().map(|tr| tr.a.clone()).collect();
            let next_window: Vec<A> = traj[i + 1..=t].iter().map(|tr| tr.a.clone()).collect();
            let next_base = if delay == 0 {
                traj[t].s_next.clone()
            } else {
                traj[i + 1].s.clone()
            };
            AugmentedTuple {
                x: AugmentedState::new(traj[i].s.clone(), window),
                a: traj[t].a.clone(),
                r: traj[t].r,
                x_next: AugmentedState::new(next_base, next_window),
                true_state: traj[t].s.clone(),
                intermediate: traj[i + 1..=t].iter().map(|tr| tr.s.clone()).collect(),
                next_true_state: traj[t].s_next.clone(),
                window_rewards: traj[i..t].iter().map(|tr| tr.r).collect(),
                done: traj[t].done,
            }
        })
        .collect()
}

/// Reassembles the delay-free trajectory from its augmented tuples.
pub fn recover_trajectory<S: Clone, A: Clone>(tuples: &[AugmentedTuple<S, A>]) -> Vec<Transition<S, A>> {
    let Some(first) = tuples.first() else {
        return Vec::new();
    };
    let mut states: Vec<S> = vec![first.x.base.clone()];
    states.extend(first.intermediate.iter().cloned());
    let mut actions: Vec<A> = first.x.window.clone();
    let mut rewards: Vec<f64> = first.window_rewards.clone();
    for tup in tuples {
        actions.push(tup.a.clone());
        rewards.push(tup.r);
    }
    for tup in &tuples[1..] {
        states.push(tup.true_state.clone());
    }
    let last = tuples.last().expect("non-empty");
    states.push(last.next_true_state.clone());
    (0..actions.len())
        .map(|t| Transition {
            s: states[t].clone(),
            a: actions[t].clone(),
            r: rewards[t],
            s_next: states[t + 1].clone(),
            done: t + 1 == actions.len() && last.done,
        })
        .collect()
}

/// Belief samples for every step of a trajectory: boundary steps `t < delay`
/// padded at the front with `pad` and flagged masked, then full windows.
pub fn belief_samples<S: Clone, A: Clone>(
    traj: &[Transition<S, A>],
    delay: usize,
    pad: A,
) -> Vec<BeliefSample<S, A>> {
    let mut out = Vec::new();
    if delay == 0 {
        return out;
    }
    for t in 1..delay.min(traj.len() + 1) {
        let n_masked = delay - t;
        let mut window = vec![pad.clone(); n_masked];
        window.extend(traj[..t].iter().map(|tr| tr.a.clone()));
        out.push(BeliefSample {
            base: traj[0].s.clone(),
            window,
            n_masked,
            labels: traj[..t].iter().map(|tr| tr.s_next.clone()).collect(),
        });
    }
    for tup in augment_trajectory(traj, delay) {
        out.push(BeliefSample {
            base: tup.x.base,
            window: tup.x.window,
            n_masked: 0,
            labels: tup.intermediate,
        });
    }
    out
}

// ── Delay simulator ──────────────────────────────────────────────────────

/// Tabular environment observed with a constant delay. The agent sees
/// `x_t = (s_{t-delay}, a_{t-delay}, .., a_{t-1})` while rewards accrue on
/// the hidden current state.
#[derive(Debug, Clone)]
pub struct DelaySimulator<'a> {
    mdp: &'a TabularMdp,
    delay: usize,
    states: VecDeque<usize>,
    window: VecDeque<usize>,
}

impl<'a> DelaySimulator<'a> {
    /// Starts from `s ~ rho0` with the window filled by `initial_action`,
    /// matching the initial distribution of [`build_augmented_mdp`].
    pub fn reset<R: Rng + ?Sized>(
        mdp: &'a TabularMdp,
        delay: usize,
        initial_action: usize,
        rng: &mut R,
    ) -> Self {
        let s0 = sample_index(mdp.rho0(), rng);
        let mut states = VecDeque::from([s0]);
        let mut s = s0;
        for _ in 0..delay {
            s = mdp.sample_next(s, initial_action, rng);
            states.push_back(s);
        }
        Self {
            mdp,
            delay,
            states,
            window: VecDeque::from(vec![initial_action; delay]),
        }
    }

    pub fn observation(&self) -> TabularAugmented {
        AugmentedState::new(self.states[0], self.window.iter().copied().collect())
    }

    pub fn current_state(&self) -> usize {
        *self.states.back().expect("non-empty")
    }

    /// Acts on the hidden current state and returns its reward.
    pub fn step<R: Rng + ?Sized>(&mut self, a: usize, rng: &mut R) -> f64 {
        let s = self.current_state();
        let r = self.mdp.reward(s, a);
        let next = self.mdp.sample_next(s, a, rng);
        self.states.push_back(next);
        self.states.pop_front();
        if self.delay > 0 {
            self.window.push_back(a);
            self.window.pop_front();
        }
        r
    }
}

/// Discounted Monte-Carlo return of an augmented-space policy over `steps`.
pub fn simulate_return<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    delay: usize,
    initial_action: usize,
    steps: usize,
    rng: &mut R,
) -> f64 {
    let mut sim = DelaySimulator::reset(mdp, delay, initial_action, rng);
    let mut ret = 0.0;
    let mut disc = 1.0;
    for _ in 0..steps {
        let x = sim.observation().index(mdp.n_actions());
        let a = policy.sample(x, rng);
        ret += disc * sim.step(a, rng);
        disc *= mdp.gamma();
    }
    ret
}
