//! Offline training loops over delay-free trajectories.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::neural::{actor_update, critic_update, AugmentedBc, NeuralActor, NeuralCritic, UpdateBatch, VecTuple};
use super::LearnerConfig;
use crate::belief::{BeliefBatch, BeliefModel, BeliefPredictor, MaskedWindow};
use crate::delayed::{augment_trajectory, belief_samples, BeliefSample, Transition};
use crate::error::{Error, Result};

pub type VecTransition = Transition<Vec<f64>, Vec<f64>>;

/// Evaluation hook returning `(mean, std)` of episode returns.
pub type EvalFn<'a> = dyn FnMut(&NeuralActor, &BeliefModel) -> Result<(f64, f64)> + 'a;
pub type BcEvalFn<'a> = dyn FnMut(&AugmentedBc) -> Result<(f64, f64)> + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learner: LearnerConfig,
    pub delay: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Belief steps before the learner starts; for separate training the
    /// belief is frozen afterwards.
    pub belief_pretrain_steps: usize,
    pub belief_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learner: LearnerConfig::default(),
            delay: 4,
            epochs: 10,
            steps_per_epoch: 1000,
            belief_pretrain_steps: 2000,
            belief_batch: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.learner.validate()?;
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.belief_batch == 0 {
            return Err(Error::Config(
                "epochs, steps_per_epoch and belief_batch must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub belief_loss: f64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub seed: u64,
}

pub const METRICS_HEADER: &str = "epoch,critic_loss,actor_loss,belief_loss,eval_return_mean,eval_return_std,seed";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.critic_loss,
            self.actor_loss,
            self.belief_loss,
            self.eval_return_mean,
            self.eval_return_std,
            self.seed
        )
    }
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[EpochMetrics]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Learner tuples and belief samples derived from delay-free trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayedData {
    pub tuples: Vec<VecTuple>,
    pub samples: Vec<BeliefSample<Vec<f64>, Vec<f64>>>,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl DelayedData {
    pub fn new(trajectories: &[Vec<VecTransition>], delay: usize) -> Result<Self> {
        let first = trajectories
            .iter()
            .find_map(|t| t.first())
            .ok_or(Error::EmptyDataset)?;
        let (state_dim, action_dim) = (first.s.len(), first.a.len());
        let pad = vec![0.0; action_dim];
        let mut tuples = Vec::new();
        let mut samples = Vec::new();
        for traj in trajectories {
            tuples.extend(augment_trajectory(traj, delay));
            samples.extend(belief_samples(traj, delay, pad.clone()));
        }
        if tuples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            tuples,
            samples,
            state_dim,
            action_dim,
        })
    }

    pub fn sample_tuples(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<&VecTuple> {
        (0..n)
            .map(|_| &self.tuples[rng.random_range(0..self.tuples.len())])
            .collect()
    }

    pub fn sample_beliefs(&self, n: usize, rng: &mut ChaCha8Rng) -> Option<BeliefBatch> {
        if self.samples.is_empty() {
            return None;
        }
        let picked: Vec<_> = (0..n)
            .map(|_| self.samples[rng.random_range(0..self.samples.len())].clone())
            .collect();
        Some(BeliefBatch::from_samples(&picked))
    }
}

/// Actor-critic training state that can be driven one epoch at a time.
pub struct DtcorlTrainer {
    pub cfg: TrainConfig,
    pub joint: bool,
    pub data: DelayedData,
    pub actor: NeuralActor,
    pub critic: NeuralCritic,
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl DtcorlTrainer {
    pub fn new(data: DelayedData, cfg: TrainConfig, joint: bool) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let l = &cfg.learner;
        let actor = NeuralActor::new(data.state_dim, data.action_dim, l.hidden, l.actor_lr, &mut rng);
        let critic = NeuralCritic::new(data.state_dim, data.action_dim, l.hidden, l.critic_lr, &mut rng);
        Ok(Self {
            cfg,
            joint,
            data,
            actor,
            critic,
            epoch: 0,
            rng,
        })
    }

    /// Continues at `epoch` with a stream derived from the seed and epoch,
    /// so resumed runs are reproducible.
    pub fn resume_at(&mut self, epoch: usize) {
        self.epoch = epoch;
        self.rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }

    /// Runs the belief pretraining phase; returns the last loss.
    pub fn pretrain_belief(&mut self, belief: &mut BeliefModel) -> Result<f64> {
        let mut last = f64::NAN;
        if let Some(model) = belief.learned_mut() {
            for _ in 0..self.cfg.belief_pretrain_steps {
                let Some(batch) = self.data.sample_beliefs(self.cfg.belief_batch, &mut self.rng) else {
                    break;
                };
                last = model.train_step(&batch, &mut self.rng)?;
            }
        }
        Ok(last)
    }

    /// One epoch of critic/actor steps (plus belief steps when joint).
    pub fn run_epoch(
        &mut self,
        belief: &mut BeliefModel,
        eval: Option<&mut EvalFn<'_>>,
    ) -> Result<EpochMetrics> {
        let l = self.cfg.learner.clone();
        let (mut c_sum, mut a_sum, mut b_sum) = (0.0, 0.0, 0.0);
        let (mut a_n, mut b_n) = (0usize, 0usize);
        for step in 0..self.cfg.steps_per_epoch {
            let picked = self.data.sample_tuples(l.batch_size, &mut self.rng);
            let batch = UpdateBatch::from_tuples(&picked, &*belief, &mut self.rng)?;
            c_sum += critic_update(&mut self.critic, &self.actor, &batch, &l, &mut self.rng)?;
            if (step + 1) % l.actor_freq == 0 {
                a_sum += actor_update(&mut self.actor, &self.critic, &batch, &l)?;
                a_n += 1;
            }
            if self.joint {
                if let Some(model) = belief.learned_mut() {
                    if let Some(bb) = self.data.sample_beliefs(self.cfg.belief_batch, &mut self.rng) {
                        b_sum += model.train_step(&bb, &mut self.rng)?;
                        b_n += 1;
                    }
                }
            }
        }
        let belief_loss = if b_n > 0 {
            b_sum / b_n as f64
        } else {
            match belief.learned() {
                Some(m) => match self.data.sample_beliefs(self.cfg.belief_batch, &mut self.rng) {
                    Some(bb) => m.loss(&bb)?,
                    None => f64::NAN,
                },
                None => f64::NAN,
            }
        };
        let (eval_return_mean, eval_return_std) = match eval {
            Some(f) => f(&self.actor, belief)?,
            None => (f64::NAN, f64::NAN),
        };
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.epoch,
            critic_loss: c_sum / self.cfg.steps_per_epoch as f64,
            actor_loss: if a_n > 0 { a_sum / a_n as f64 } else { f64::NAN },
            belief_loss,
            eval_return_mean,
            eval_return_std,
            seed: self.cfg.seed,
        })
    }
}

pub struct TrainOutput {
    pub actor: NeuralActor,
    pub critic: NeuralCritic,
    pub metrics: Vec<EpochMetrics>,
}

/// Full run: belief pretraining, then `epochs` learner epochs. With
/// `joint`, the belief also takes one step per learner step.
pub fn train_dtcorl(
    trajectories: &[Vec<VecTransition>],
    belief: &mut BeliefModel,
    cfg: &TrainConfig,
    joint: bool,
    mut eval: Option<&mut EvalFn<'_>>,
) -> Result<TrainOutput> {
    let data = DelayedData::new(trajectories, cfg.delay)?;
    if belief.state_dim() != data.state_dim {
        return Err(Error::DimensionMismatch {
            expected: data.state_dim,
            got: belief.state_dim(),
        });
    }
    if belief.max_delay() < cfg.delay {
        return Err(Error::WindowTooLong {
            got: cfg.delay,
            max: belief.max_delay(),
        });
    }
    let mut trainer = DtcorlTrainer::new(data, cfg.clone(), joint)?;
    trainer.pretrain_belief(belief)?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let m = trainer.run_epoch(belief, eval.as_deref_mut())?;
        metrics.push(m);
    }
    Ok(TrainOutput {
        actor: trainer.actor,
        critic: trainer.critic,
        metrics,
    })
}

/// Behavior cloning on flattened augmented states at `cfg.delay`.
pub fn train_augmented_bc(
    trajectories: &[Vec<VecTransition>],
    cfg: &TrainConfig,
    mut eval: Option<&mut BcEvalFn<'_>>,
) -> Result<(AugmentedBc, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let data = DelayedData::new(trajectories, cfg.delay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = &cfg.learner;
    let mut model = AugmentedBc::new(data.state_dim, data.action_dim, cfg.delay, l.hidden, l.actor_lr, &mut rng);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let picked = data.sample_tuples(l.batch_size, &mut rng);
            let windows: Vec<MaskedWindow> = picked
                .iter()
                .map(|t| MaskedWindow::new(t.x.base.clone(), t.x.window.clone(), 0))
                .collect();
            let actions: Vec<Vec<f64>> = picked.iter().map(|t| t.a.clone()).collect();
            total += model.train_step(&windows, &actions)?;
        }
        let (mean, std) = match eval.as_deref_mut() {
            Some(f) => f(&model)?,
            None => (f64::NAN, f64::NAN),
        };
        metrics.push(EpochMetrics {
            epoch,
            critic_loss: f64::NAN,
            actor_loss: total / cfg.steps_per_epoch as f64,
            belief_loss: f64::NAN,
            eval_return_mean: mean,
            eval_return_std: std,
            seed: cfg.seed,
        });
    }
    Ok((model, metrics))
}
