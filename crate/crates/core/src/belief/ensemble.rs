//! Ensemble of one-step dynamics models rolled out autoregressively.
//!
//! Each member maps `(s, a)` to a predicted state change. Training is
//! teacher-forced on consecutive label pairs; prediction folds each member
//! over the unmasked actions and averages the final states.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{validate_window, BeliefBatch, BeliefPredictor, LearnedBelief, MaskedWindow};
use crate::error::{Error, Result};
use crate::nn::layers::{mat_to_rows, rows_to_mat};
use crate::nn::{Activation, Adam, AdamConfig, Mat, Mlp, ParamSet, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub max_delay: usize,
    pub n_members: usize,
    pub hidden: usize,
    pub n_hidden_layers: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl EnsembleConfig {
    pub fn new(state_dim: usize, action_dim: usize, max_delay: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            max_delay,
            n_members: 5,
            hidden: 256,
            n_hidden_layers: 2,
            lr: 1e-3,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_members == 0 || self.hidden == 0 || self.state_dim == 0 || self.action_dim == 0 {
            return Err(Error::Config("ensemble sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleBelief {
    cfg: EnsembleConfig,
    params: ParamSet,
    opt: Adam,
    members: Vec<Mlp>,
}

impl EnsembleBelief {
    pub fn new(cfg: EnsembleConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut sizes = vec![cfg.state_dim + cfg.action_dim];
        sizes.extend(std::iter::repeat_n(cfg.hidden, cfg.n_hidden_layers));
        sizes.push(cfg.state_dim);
        let mut params = ParamSet::new();
        let members = (0..cfg.n_members)
            .map(|m| Mlp::new(&mut params, &format!("member{m}"), &sizes, Activation::Relu, rng))
            .collect();
        let opt = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
            &params,
        );
        Ok(Self {
            cfg,
            params,
            opt,
            members,
        })
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.cfg
    }

    fn step_member(&self, m: usize, states: &Mat, actions: &Mat) -> Mat {
        let mut tape = Tape::new();
        let x = tape.constant(concat(states, actions));
        let d = self.members[m].forward(&mut tape, &self.params, x);
        states + tape.value(d)
    }

    /// Per-member final states, `[member][window]`.
    pub fn member_predictions(&self, windows: &[MaskedWindow]) -> Result<Vec<Vec<Vec<f64>>>> {
        if windows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for w in windows {
            validate_window(w, self.cfg.state_dim, self.cfg.action_dim, self.cfg.max_delay)?;
        }
        let horizon = windows.iter().map(MaskedWindow::effective_delay).max().unwrap_or(0);
        let obs: Vec<Vec<f64>> = windows.iter().map(|w| w.obs.clone()).collect();
        let start = rows_to_mat(&obs);
        let mut out = Vec::with_capacity(self.members.len());
        for m in 0..self.members.len() {
            let mut s = start.clone();
            // Windows are aligned at their end; shorter ones idle first.
            for k in 0..horizon {
                let active: Vec<usize> = (0..windows.len())
                    .filter(|&i| k + windows[i].effective_delay() >= horizon)
                    .collect();
                let acts: Vec<Vec<f64>> = active
                    .iter()
                    .map(|&i| {
                        let w = &windows[i];
                        w.unmasked()[k + w.effective_delay() - horizon].clone()
                    })
                    .collect();
                let cur: Vec<Vec<f64>> = active.iter().map(|&i| s.row(i).iter().copied().collect()).collect();
                let next = self.step_member(m, &rows_to_mat(&cur), &rows_to_mat(&acts));
                for (r, &i) in active.iter().enumerate() {
                    s.set_row(i, &next.row(r));
                }
            }
            out.push(mat_to_rows(&s));
        }
        Ok(out)
    }

    /// Teacher-forced transition pairs `(s, a, s')` from a batch.
    fn pairs(&self, batch: &BeliefBatch) -> Result<(Mat, Mat, Mat)> {
        batch.validate(self.cfg.state_dim, self.cfg.action_dim, self.cfg.max_delay)?;
        let (mut s, mut a, mut y) = (Vec::new(), Vec::new(), Vec::new());
        for (w, labels) in batch.windows.iter().zip(&batch.labels) {
            let mut prev = &w.obs;
            for (act, next) in w.unmasked().iter().zip(labels) {
                s.push(prev.clone());
                a.push(act.clone());
                y.push(next.clone());
                prev = next;
            }
        }
        if s.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok((rows_to_mat(&s), rows_to_mat(&a), rows_to_mat(&y)))
    }
}

fn concat(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

impl BeliefPredictor for EnsembleBelief {
    fn state_dim(&self) -> usize {
        self.cfg.state_dim
    }

    fn max_delay(&self) -> usize {
        self.cfg.max_delay
    }

    fn predict(&self, windows: &[MaskedWindow]) -> Result<Vec<Vec<f64>>> {
        let per_member = self.member_predictions(windows)?;
        let n = per_member.len() as f64;
        let mut mean = vec![vec![0.0; self.cfg.state_dim]; windows.len()];
        for member in &per_member {
            for (acc, row) in mean.iter_mut().zip(member) {
                for (x, v) in acc.iter_mut().zip(row) {
                    *x += v / n;
                }
            }
        }
        Ok(mean)
    }
}

impl LearnedBelief for EnsembleBelief {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn loss(&self, batch: &BeliefBatch) -> Result<f64> {
        Ok(self.loss_and_grads(&self.params, batch, None)?.0)
    }

    /// Mean over members of the one-step squared error.
    fn loss_and_grads(&self, params: &ParamSet, batch: &BeliefBatch, _rng: Option<&mut ChaCha8Rng>) -> Result<(f64, Vec<Mat>)> {
        let (s, a, y) = self.pairs(batch)?;
        let mut tape = Tape::new();
        let x = tape.constant(concat(&s, &a));
        let target = tape.constant(y - &s);
        let mut total = None;
        for m in &self.members {
            let d = m.forward(&mut tape, params, x);
            let e = tape.sub(d, target);
            let sq = tape.square(e);
            let l = tape.mean(sq);
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l),
            });
        }
        let total = tape.scale(total.expect("at least one member"), 1.0 / self.members.len() as f64);
        Ok((tape.scalar(total), tape.backward(total).for_set(params)))
    }

    fn params_and_optimizer(&mut self) -> (&mut ParamSet, &mut Adam) {
        (&mut self.params, &mut self.opt)
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "ensemble", "config": self.cfg })
    }
}
