//! Belief predictors: map an augmented observation (delayed state plus the
//! actions taken since) to an estimate of the current state.

pub mod ensemble;
pub mod transformer;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::delayed::BeliefSample;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_checkpoint, write_checkpoint, BELIEF_MAGIC};
use crate::nn::{Adam, Mat, ParamSet};

pub use ensemble::{EnsembleBelief, EnsembleConfig};
pub use transformer::{BeliefMode, TransformerBelief, TransformerConfig};

/// Delayed observation plus buffered actions. The first `n_masked` slots
/// are placeholders whose content must not influence any prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedWindow {
    pub obs: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    pub n_masked: usize,
}

impl MaskedWindow {
    pub fn new(obs: Vec<f64>, actions: Vec<Vec<f64>>, n_masked: usize) -> Self {
        Self {
            obs,
            actions,
            n_masked,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Number of real (unmasked) actions.
    pub fn effective_delay(&self) -> usize {
        self.actions.len() - self.n_masked
    }

    pub fn unmasked(&self) -> &[Vec<f64>] {
        &self.actions[self.n_masked..]
    }
}

/// Windows with per-position labels for the unmasked slots.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BeliefBatch {
    pub windows: Vec<MaskedWindow>,
    pub labels: Vec<Vec<Vec<f64>>>,
}

impl BeliefBatch {
    pub fn from_samples(samples: &[BeliefSample<Vec<f64>, Vec<f64>>]) -> Self {
        Self {
            windows: samples
                .iter()
                .map(|s| MaskedWindow::new(s.base.clone(), s.window.clone(), s.n_masked))
                .collect(),
            labels: samples.iter().map(|s| s.labels.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn validate(&self, state_dim: usize, action_dim: usize, max_delay: usize) -> Result<()> {
        if self.windows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if self.labels.len() != self.windows.len() {
            return Err(Error::DimensionMismatch {
                expected: self.windows.len(),
                got: self.labels.len(),
            });
        }
        for (w, labels) in self.windows.iter().zip(&self.labels) {
            validate_window(w, state_dim, action_dim, max_delay)?;
            if labels.len() != w.effective_delay() {
                return Err(Error::DimensionMismatch {
                    expected: w.effective_delay(),
                    got: labels.len(),
                });
            }
            if let Some(bad) = labels.iter().find(|l| l.len() != state_dim) {
                return Err(Error::DimensionMismatch {
                    expected: state_dim,
                    got: bad.len(),
                });
            }
        }
        Ok(())
    }
}

pub fn validate_window(w: &MaskedWindow, state_dim: usize, action_dim: usize, max_delay: usize) -> Result<()> {
    if w.len() > max_delay {
        return Err(Error::WindowTooLong {
            got: w.len(),
            max: max_delay,
        });
    }
    if w.n_masked > w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            got: w.n_masked,
        });
    }
    if w.obs.len() != state_dim {
        return Err(Error::DimensionMismatch {
            expected: state_dim,
            got: w.obs.len(),
        });
    }
    if let Some(bad) = w.actions.iter().find(|a| a.len() != action_dim) {
        return Err(Error::DimensionMismatch {
            expected: action_dim,
            got: bad.len(),
        });
    }
    Ok(())
}

/// Anything that turns delayed windows into a current-state estimate.
pub trait BeliefPredictor {
    fn state_dim(&self) -> usize;
    fn max_delay(&self) -> usize;
    /// Point estimate of the current state for each window.
    fn predict(&self, windows: &[MaskedWindow]) -> Result<Vec<Vec<f64>>>;
    /// Estimate used inside learner updates; stochastic heads may sample.
    fn predict_for_learning(&self, windows: &[MaskedWindow], _rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        self.predict(windows)
    }
}

/// Learned predictors additionally train, expose parameters and checkpoint.
pub trait LearnedBelief: BeliefPredictor {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Loss in evaluation mode (no dropout).
    fn loss(&self, batch: &BeliefBatch) -> Result<f64>;
    /// Loss and gradients at `params`; dropout only when `rng` is given.
    fn loss_and_grads(&self, params: &ParamSet, batch: &BeliefBatch, rng: Option<&mut ChaCha8Rng>) -> Result<(f64, Vec<Mat>)>;
    /// Parameters together with their optimizer state.
    fn params_and_optimizer(&mut self) -> (&mut ParamSet, &mut Adam);
    fn config_json(&self) -> serde_json::Value;

    /// Writes a "DTCB" checkpoint.
    fn save<W: std::io::Write>(&self, w: W) -> Result<()>
    where
        Self: Sized,
    {
        write_checkpoint(w, BELIEF_MAGIC, &self.config_json(), &[("belief", self.params())])
    }

    /// Replaces parameters from a checkpoint written by a model with the
    /// same configuration; anything else is rejected.
    fn load_params<R: std::io::Read>(&mut self, r: R) -> Result<()>
    where
        Self: Sized,
    {
        let ck = read_checkpoint(r, BELIEF_MAGIC)?;
        ck.check_config(&self.config_json())?;
        ck.restore("belief", self.params_mut())
    }

    /// One clipped AdamW step; returns the training loss before the update.
    fn train_step(&mut self, batch: &BeliefBatch, rng: &mut ChaCha8Rng) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(self.params(), batch, Some(rng))?;
        let (params, opt) = self.params_and_optimizer();
        let step = opt.steps() as usize;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "belief loss".into(),
            });
        }
        opt.step(params, grads)?;
        if !params.all_finite() {
            return Err(Error::NonFinite {
                step,
                what: "belief parameters".into(),
            });
        }
        Ok(loss)
    }
}

/// Exact belief for environments with a known mean step: folds the mean
/// dynamics over the unmasked actions.
pub struct AnalyticBelief<F> {
    state_dim: usize,
    max_delay: usize,
    step: F,
}

impl<F: Fn(&[f64], &[f64]) -> Vec<f64>> AnalyticBelief<F> {
    pub fn new(state_dim: usize, max_delay: usize, step: F) -> Self {
        Self {
            state_dim,
            max_delay,
            step,
        }
    }

    /// States after each unmasked action.
    pub fn rollout(&self, w: &MaskedWindow) -> Vec<Vec<f64>> {
        let mut s = w.obs.clone();
        w.unmasked()
            .iter()
            .map(|a| {
                s = (self.step)(&s, a);
                s.clone()
            })
            .collect()
    }
}

impl<F: Fn(&[f64], &[f64]) -> Vec<f64>> BeliefPredictor for AnalyticBelief<F> {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn max_delay(&self) -> usize {
        self.max_delay
    }
    fn predict(&self, windows: &[MaskedWindow]) -> Result<Vec<Vec<f64>>> {
        windows
            .iter()
            .map(|w| {
                if w.len() > self.max_delay {
                    return Err(Error::WindowTooLong {
                        got: w.len(),
                        max: self.max_delay,
                    });
                }
                Ok(self.rollout(w).pop().unwrap_or_else(|| w.obs.clone()))
            })
            .collect()
    }
}

/// Per-step mean squared error of `predictor` on windows whose labels are
/// full-length; entry `k` is the error `k + 1` steps ahead.
pub fn stepwise_mse<P: BeliefPredictor + ?Sized>(predictor: &P, batch: &BeliefBatch, horizon: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(horizon);
    for k in 1..=horizon {
        let windows: Vec<MaskedWindow> = batch
            .windows
            .iter()
            .map(|w| MaskedWindow::new(w.obs.clone(), w.actions[..k].to_vec(), 0))
            .collect();
        let preds = predictor.predict(&windows)?;
        let mut se = 0.0;
        let mut n = 0usize;
        for (p, labels) in preds.iter().zip(&batch.labels) {
            for (x, y) in p.iter().zip(&labels[k - 1]) {
                se += (x - y) * (x - y);
                n += 1;
            }
        }
        out.push(se / n as f64);
    }
    Ok(out)
}

/// Any belief the learner can consume; only the learned variants train.
pub enum BeliefModel {
    Transformer(TransformerBelief),
    Ensemble(EnsembleBelief),
    Fixed(Box<dyn BeliefPredictor>),
}

impl BeliefModel {
    pub fn learned(&self) -> Option<&dyn LearnedBelief> {
        match self {
            BeliefModel::Transformer(m) => Some(m),
            BeliefModel::Ensemble(m) => Some(m),
            BeliefModel::Fixed(_) => None,
        }
    }

    pub fn learned_mut(&mut self) -> Option<&mut dyn LearnedBelief> {
        match self {
            BeliefModel::Transformer(m) => Some(m),
            BeliefModel::Ensemble(m) => Some(m),
            BeliefModel::Fixed(_) => None,
        }
    }

    /// Writes a checkpoint of a learned belief; fixed beliefs have none.
    pub fn save<W: std::io::Write>(&self, w: W) -> Result<()> {
        match self {
            BeliefModel::Transformer(m) => m.save(w),
            BeliefModel::Ensemble(m) => m.save(w),
            BeliefModel::Fixed(_) => Err(Error::Checkpoint("a fixed belief has no parameters".into())),
        }
    }

    pub fn load_params<R: std::io::Read>(&mut self, r: R) -> Result<()> {
        match self {
            BeliefModel::Transformer(m) => m.load_params(r),
            BeliefModel::Ensemble(m) => m.load_params(r),
            BeliefModel::Fixed(_) => Err(Error::Checkpoint("a fixed belief has no parameters".into())),
        }
    }

    fn inner(&self) -> &dyn BeliefPredictor {
        match self {
            BeliefModel::Transformer(m) => m,
            BeliefModel::Ensemble(m) => m,
            BeliefModel::Fixed(m) => m.as_ref(),
        }
    }
}

impl BeliefPredictor for BeliefModel {
    fn state_dim(&self) -> usize {
        self.inner().state_dim()
    }
    fn max_delay(&self) -> usize {
        self.inner().max_delay()
    }
    fn predict(&self, windows: &[MaskedWindow]) -> Result<Vec<Vec<f64>>> {
        self.inner().predict(windows)
    }
    fn predict_for_learning(&self, windows: &[MaskedWindow], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        self.inner().predict_for_learning(windows, rng)
    }
}
