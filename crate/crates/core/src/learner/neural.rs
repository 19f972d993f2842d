//! Neural actor-critic on belief state estimates, and the augmented-state
//! behavior-cloning baseline.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;

use super::LearnerConfig;
use crate::belief::{BeliefPredictor, MaskedWindow};
use crate::delayed::AugmentedTuple;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_checkpoint, write_checkpoint, POLICY_MAGIC};
use crate::nn::layers::{mat_to_rows, rows_to_mat};
use crate::nn::{Activation, Adam, AdamConfig, Mat, Mlp, ParamSet, Tape, Var};

pub type VecTuple = AugmentedTuple<Vec<f64>, Vec<f64>>;

fn adam(lr: f64, ps: &ParamSet) -> Adam {
    Adam::new(
        AdamConfig {
            lr,
            ..Default::default()
        },
        ps,
    )
}

fn non_finite(step: u64, what: &str) -> Error {
    Error::NonFinite {
        step: step as usize,
        what: what.into(),
    }
}

/// Deterministic policy `tanh(mlp(s))`.
#[derive(Debug, Clone)]
pub struct NeuralActor {
    pub params: ParamSet,
    pub target: ParamSet,
    net: Mlp,
    opt: Adam,
}

impl NeuralActor {
    pub fn new(in_dim: usize, action_dim: usize, hidden: usize, lr: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let net = Mlp::new(
            &mut params,
            "actor",
            &[in_dim, hidden, hidden, action_dim],
            Activation::Relu,
            rng,
        );
        let target = params.clone();
        let opt = adam(lr, &params);
        Self {
            params,
            target,
            net,
            opt,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.net.out_dim()
    }

    pub fn steps(&self) -> u64 {
        self.opt.steps()
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Var {
        let h = self.net.forward(tape, ps, x);
        tape.tanh(h)
    }

    fn eval(&self, ps: &ParamSet, states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if let Some(bad) = states.iter().find(|s| s.len() != self.in_dim()) {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                got: bad.len(),
            });
        }
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let x = tape.constant(rows_to_mat(states));
        let a = self.forward(&mut tape, ps, x);
        Ok(mat_to_rows(tape.value(a)))
    }

    pub fn act(&self, states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.eval(&self.params, states)
    }

    pub fn act_target(&self, states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.eval(&self.target, states)
    }

    pub fn soft_update(&mut self, tau: f64) {
        self.target.soft_update(&self.params, tau);
    }

    fn apply(&mut self, loss: f64, grads: Vec<Mat>, what: &str) -> Result<()> {
        if !loss.is_finite() {
            return Err(non_finite(self.opt.steps(), what));
        }
        self.opt.step(&mut self.params, grads)?;
        if !self.params.all_finite() {
            return Err(non_finite(self.opt.steps(), what));
        }
        Ok(())
    }
}

/// Twin Q networks over `(state, action)` with trailing targets.
#[derive(Debug, Clone)]
pub struct NeuralCritic {
    pub params: ParamSet,
    pub target: ParamSet,
    q1: Mlp,
    q2: Mlp,
    opt: Adam,
}

impl NeuralCritic {
    pub fn new(state_dim: usize, action_dim: usize, hidden: usize, lr: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let sizes = [state_dim + action_dim, hidden, hidden, 1];
        let q1 = Mlp::new(&mut params, "q1", &sizes, Activation::Relu, rng);
        let q2 = Mlp::new(&mut params, "q2", &sizes, Activation::Relu, rng);
        let target = params.clone();
        let opt = adam(lr, &params);
        Self {
            params,
            target,
            q1,
            q2,
            opt,
        }
    }

    pub fn steps(&self) -> u64 {
        self.opt.steps()
    }

    fn input(tape: &mut Tape, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Var {
        let rows: Vec<Vec<f64>> = states
            .iter()
            .zip(actions)
            .map(|(s, a)| s.iter().chain(a).copied().collect())
            .collect();
        tape.constant(rows_to_mat(&rows))
    }

    /// `(Q1, Q2)` under `ps`, recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, sa: Var) -> (Var, Var) {
        (self.q1.forward(tape, ps, sa), self.q2.forward(tape, ps, sa))
    }

    pub fn q_values(&self, states: &[Vec<f64>], actions: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let sa = Self::input(&mut tape, states, actions);
        let (a, b) = self.forward(&mut tape, &self.params, sa);
        (
            tape.value(a).iter().copied().collect(),
            tape.value(b).iter().copied().collect(),
        )
    }

    fn target_min(&self, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Vec<f64> {
        let mut tape = Tape::new();
        let sa = Self::input(&mut tape, states, actions);
        let (a, b) = self.forward(&mut tape, &self.target, sa);
        tape.value(a)
            .iter()
            .zip(tape.value(b).iter())
            .map(|(x, y)| x.min(*y))
            .collect()
    }

    pub fn soft_update(&mut self, tau: f64) {
        self.target.soft_update(&self.params, tau);
    }
}

/// A learner minibatch on (estimated) current states.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateBatch {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<Vec<f64>>,
    pub dones: Vec<bool>,
}

impl UpdateBatch {
    /// States come from the belief: `s_hat = b(x)` and `s_hat' = b(x')`.
    pub fn from_tuples<B: BeliefPredictor + ?Sized>(
        tuples: &[&VecTuple],
        belief: &B,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if tuples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let windows = |next: bool| -> Vec<MaskedWindow> {
            tuples
                .iter()
                .map(|t| {
                    let x = if next { &t.x_next } else { &t.x };
                    MaskedWindow::new(x.base.clone(), x.window.clone(), 0)
                })
                .collect()
        };
        let mut both = windows(false);
        both.extend(windows(true));
        let mut est = belief.predict_for_learning(&both, rng)?;
        let next_states = est.split_off(tuples.len());
        Ok(Self {
            states: est,
            actions: tuples.iter().map(|t| t.a.clone()).collect(),
            rewards: tuples.iter().map(|t| t.r).collect(),
            next_states,
            dones: tuples.iter().map(|t| t.done).collect(),
        })
    }

    /// The delay-free batch on true states.
    pub fn from_true_states(tuples: &[&VecTuple]) -> Result<Self> {
        if tuples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(Self {
            states: tuples.iter().map(|t| t.true_state.clone()).collect(),
            actions: tuples.iter().map(|t| t.a.clone()).collect(),
            rewards: tuples.iter().map(|t| t.r).collect(),
            next_states: tuples.iter().map(|t| t.next_true_state.clone()).collect(),
            dones: tuples.iter().map(|t| t.done).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Clipped Gaussian smoothing noise for target actions.
pub fn target_noise(n: usize, action_dim: usize, cfg: &LearnerConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..action_dim)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    (cfg.policy_noise * z).clamp(-cfg.noise_clip, cfg.noise_clip)
                })
                .collect()
        })
        .collect()
}

/// `r + gamma (1 - done) min(Q1', Q2')(s', clip(pi'(s') + noise))`, with the
/// optional behavior proxy `- lambda1 ||pi(s) - a||^2` on the current step.
pub fn td_targets(
    critic: &NeuralCritic,
    actor: &NeuralActor,
    batch: &UpdateBatch,
    noise: &[Vec<f64>],
    cfg: &LearnerConfig,
) -> Result<Vec<f64>> {
    let next_actions: Vec<Vec<f64>> = actor
        .act_target(&batch.next_states)?
        .into_iter()
        .zip(noise)
        .map(|(a, n)| a.iter().zip(n).map(|(x, e)| (x + e).clamp(-1.0, 1.0)).collect())
        .collect();
    let q_next = critic.target_min(&batch.next_states, &next_actions);
    let proxy = if cfg.critic_bc_proxy && cfg.lambda1 > 0.0 {
        actor
            .act(&batch.states)?
            .iter()
            .zip(&batch.actions)
            .map(|(p, a)| cfg.lambda1 * p.iter().zip(a).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
            .collect()
    } else {
        vec![0.0; batch.len()]
    };
    Ok((0..batch.len())
        .map(|i| {
            let cont = if batch.dones[i] { 0.0 } else { cfg.gamma };
            batch.rewards[i] - proxy[i] + cont * q_next[i]
        })
        .collect())
}

/// Twin-critic TD loss and its gradients at `ps` for fixed targets.
pub fn critic_loss_and_grads(critic: &NeuralCritic, ps: &ParamSet, batch: &UpdateBatch, targets: &[f64]) -> (f64, Vec<Mat>) {
    let mut tape = Tape::new();
    let sa = NeuralCritic::input(&mut tape, &batch.states, &batch.actions);
    let (q1, q2) = critic.forward(&mut tape, ps, sa);
    let y = tape.constant(Mat::from_column_slice(targets.len(), 1, targets));
    let e1 = tape.sub(q1, y);
    let e2 = tape.sub(q2, y);
    let s1 = tape.square(e1);
    let s2 = tape.square(e2);
    let l1 = tape.mean(s1);
    let l2 = tape.mean(s2);
    let loss = tape.add(l1, l2);
    (tape.scalar(loss), tape.backward(loss).for_set(ps))
}

/// One critic step followed by a soft target update; returns the TD loss.
pub fn critic_update(
    critic: &mut NeuralCritic,
    actor: &NeuralActor,
    batch: &UpdateBatch,
    cfg: &LearnerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let noise = target_noise(batch.len(), actor.action_dim(), cfg, rng);
    let targets = td_targets(critic, actor, batch, &noise, cfg)?;
    let (loss, grads) = critic_loss_and_grads(critic, &critic.params, batch, &targets);
    if !loss.is_finite() {
        return Err(non_finite(critic.opt.steps(), "critic loss"));
    }
    critic.opt.step(&mut critic.params, grads)?;
    if !critic.params.all_finite() {
        return Err(non_finite(critic.opt.steps(), "critic parameters"));
    }
    critic.soft_update(cfg.tau);
    Ok(loss)
}

/// `-mean Q1(s, pi(s)) + alpha mean ||a - pi(s)||^2` and its actor gradients.
pub fn actor_loss_and_grads(
    actor: &NeuralActor,
    ps: &ParamSet,
    critic: &NeuralCritic,
    states: &[Vec<f64>],
    actions: &[Vec<f64>],
    alpha: f64,
) -> Result<(f64, Vec<Mat>)> {
    if states.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut tape = Tape::new();
    let s = tape.constant(rows_to_mat(states));
    let pi = actor.forward(&mut tape, ps, s);
    let sa = tape.concat_cols(&[s, pi]);
    let q1 = critic.q1.forward(&mut tape, &critic.params, sa);
    let q_mean = tape.mean(q1);
    let neg_q = tape.scale(q_mean, -1.0);
    let a = tape.constant(rows_to_mat(actions));
    let diff = tape.sub(pi, a);
    let sq = tape.square(diff);
    let bc_sum = tape.sum(sq);
    let bc = tape.scale(bc_sum, alpha / states.len() as f64);
    let loss = tape.add(neg_q, bc);
    Ok((tape.scalar(loss), tape.backward(loss).for_set(ps)))
}

/// One actor step followed by a soft update of the actor target.
pub fn actor_update(actor: &mut NeuralActor, critic: &NeuralCritic, batch: &UpdateBatch, cfg: &LearnerConfig) -> Result<f64> {
    let (loss, grads) = actor_loss_and_grads(actor, &actor.params, critic, &batch.states, &batch.actions, cfg.alpha)?;
    actor.apply(loss, grads, "actor loss")?;
    actor.soft_update(cfg.tau);
    Ok(loss)
}

/// Flattened augmented input `[obs, a_1, .., a_max]`; masked and missing
/// slots are zero. Windows shorter than `max_delay` are right-aligned so the
/// most recent action always occupies the last slot.
pub fn flatten_window(w: &MaskedWindow, max_delay: usize) -> Result<Vec<f64>> {
    if w.len() > max_delay {
        return Err(Error::WindowTooLong {
            got: w.len(),
            max: max_delay,
        });
    }
    let da = w.actions.first().map_or(0, Vec::len);
    let mut out = w.obs.clone();
    let lead = max_delay - w.len() + w.n_masked;
    out.extend(std::iter::repeat_n(0.0, lead * da));
    for a in w.unmasked() {
        out.extend_from_slice(a);
    }
    Ok(out)
}

/// Behavior cloning on flattened augmented states.
#[derive(Debug, Clone)]
pub struct AugmentedBc {
    pub actor: NeuralActor,
    pub state_dim: usize,
    pub action_dim: usize,
    pub max_delay: usize,
}

impl AugmentedBc {
    pub fn new(state_dim: usize, action_dim: usize, max_delay: usize, hidden: usize, lr: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            actor: NeuralActor::new(state_dim + max_delay * action_dim, action_dim, hidden, lr, rng),
            state_dim,
            action_dim,
            max_delay,
        }
    }

    fn inputs(&self, windows: &[MaskedWindow]) -> Result<Vec<Vec<f64>>> {
        windows.iter().map(|w| flatten_window(w, self.max_delay)).collect()
    }

    pub fn act(&self, windows: &[MaskedWindow]) -> Result<Vec<Vec<f64>>> {
        self.actor.act(&self.inputs(windows)?)
    }

    pub fn loss_and_grads(&self, ps: &ParamSet, windows: &[MaskedWindow], actions: &[Vec<f64>]) -> Result<(f64, Vec<Mat>)> {
        if windows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut tape = Tape::new();
        let x = tape.constant(rows_to_mat(&self.inputs(windows)?));
        let pi = self.actor.forward(&mut tape, ps, x);
        let a = tape.constant(rows_to_mat(actions));
        let d = tape.sub(pi, a);
        let sq = tape.square(d);
        let total = tape.sum(sq);
        let loss = tape.scale(total, 1.0 / windows.len() as f64);
        Ok((tape.scalar(loss), tape.backward(loss).for_set(ps)))
    }

    /// One step on `mean ||a - pi(flatten(x))||^2`.
    pub fn train_step(&mut self, windows: &[MaskedWindow], actions: &[Vec<f64>]) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(&self.actor.params, windows, actions)?;
        self.actor.apply(loss, grads, "behavior cloning loss")?;
        Ok(loss)
    }

    pub fn config_json(&self) -> Value {
        serde_json::json!({
            "kind": "augmented_bc",
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "max_delay": self.max_delay,
            "hidden": self.actor.net.layers[0].fan_out,
        })
    }
}

/// Writes a "DTCP" checkpoint with actor and critic groups.
pub fn save_policy<W: std::io::Write>(w: W, config: &Value, actor: &NeuralActor, critic: Option<&NeuralCritic>) -> Result<()> {
    let mut groups: Vec<(&str, &ParamSet)> = vec![("actor", &actor.params), ("actor_target", &actor.target)];
    if let Some(c) = critic {
        groups.push(("critic", &c.params));
        groups.push(("critic_target", &c.target));
    }
    write_checkpoint(w, POLICY_MAGIC, config, &groups)
}

/// Restores parameters saved by [`save_policy`] after checking the config.
pub fn load_policy<R: std::io::Read>(
    r: R,
    config: &Value,
    actor: &mut NeuralActor,
    critic: Option<&mut NeuralCritic>,
) -> Result<()> {
    let ck = read_checkpoint(r, POLICY_MAGIC)?;
    ck.check_config(config)?;
    ck.restore("actor", &mut actor.params)?;
    ck.restore("actor_target", &mut actor.target)?;
    if let Some(c) = critic {
        ck.restore("critic", &mut c.params)?;
        ck.restore("critic_target", &mut c.target)?;
    }
    Ok(())
}
