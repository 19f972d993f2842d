//! Offline reinforcement learning under observation delay: tabular MDP
//! oracles, augmented delayed MDPs, learned belief predictors, belief-based
//! actor-critic learners, theory checks and a delayed-rollout harness.

pub mod belief;
pub mod delayed;
pub mod error;
pub mod learner;
pub mod mdp;
pub mod nn;
pub mod pipeline;
pub mod rollout;
pub mod theory;

pub use error::{Error, Result};
