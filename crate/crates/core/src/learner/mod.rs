//! Belief-based learners: exact tabular policy iteration with Wasserstein
//! behavior penalties, the neural actor-critic with a behavior-cloning
//! surrogate, and the augmented-state behavior-cloning baseline.

pub mod neural;
pub mod tabular;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use neural::{AugmentedBc, NeuralActor, NeuralCritic, UpdateBatch};
pub use tabular::{
    belief_policy_iteration, check_monotone_improvement, tabular_bpe, tabular_bpi, BehaviorModel, BeliefContext,
    BpeResult, MonotoneReport,
};
pub use train::{train_augmented_bc, train_dtcorl, EpochMetrics, TrainConfig, TrainOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    /// Critic-side W1 penalty weight.
    pub lambda1: f64,
    /// Actor-side W1 penalty weight.
    pub lambda2: f64,
    /// Behavior-cloning weight in the neural actor objective.
    pub alpha: f64,
    /// Additional critic/actor-side weights of the unconstrained form;
    /// tabular only, added to `lambda1` and `lambda2`.
    pub alpha1: f64,
    pub alpha2: f64,
    pub gamma: f64,
    /// Constraint margin; kept for the record, unused by the solvers.
    pub epsilon: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub tau: f64,
    pub actor_freq: usize,
    pub batch_size: usize,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub hidden: usize,
    /// Adds `lambda1 * ||pi(s') - a'||^2` inside the TD target when set.
    pub critic_bc_proxy: bool,
    /// Simplex grid resolution for tabular improvement.
    pub grid_resolution: usize,
    pub tol: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            alpha: 2.5,
            alpha1: 0.0,
            alpha2: 0.0,
            gamma: 0.99,
            epsilon: 0.0,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            tau: 5e-3,
            actor_freq: 2,
            batch_size: 256,
            policy_noise: 0.2,
            noise_clip: 0.5,
            hidden: 256,
            critic_bc_proxy: false,
            grid_resolution: 64,
            tol: crate::mdp::solve::DEFAULT_TOL,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("alpha", self.alpha),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("epsilon", self.epsilon),
            ("policy_noise", self.policy_noise),
            ("noise_clip", self.noise_clip),
        ];
        if let Some((name, v)) = weights.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be a finite nonnegative number, got {v}")));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0,1), got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0,1], got {}", self.tau)));
        }
        if self.actor_freq == 0 || self.batch_size == 0 || self.hidden == 0 || self.grid_resolution == 0 {
            return Err(Error::Config(
                "actor_freq, batch_size, hidden and grid_resolution must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Total critic-side penalty weight used by the tabular solver.
    pub fn critic_penalty(&self) -> f64 {
        self.lambda1 + self.alpha1
    }

    /// Total actor-side penalty weight used by the tabular solver.
    pub fn actor_penalty(&self) -> f64 {
        self.lambda2 + self.alpha2
    }

    /// Tabular configuration with every penalty switched off.
    pub fn unpenalized(gamma: f64) -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            alpha: 0.0,
            gamma,
            ..Self::default()
        }
    }
}
