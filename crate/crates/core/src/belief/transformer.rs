//! Causal transformer belief.
//!
//! Token sequence per sample: `[obs, slot_1, .., slot_W]`. Slot `k` holds
//! the embedding of the `k`-th buffered action, or the learned mask token
//! when the slot is masked. The output at slot `k` predicts the state after
//! the first `k` actions as `obs + head(h_k)`; the last slot is the current
//! state estimate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{validate_window, BeliefBatch, BeliefPredictor, LearnedBelief, MaskedWindow};
use crate::error::{Error, Result};
use crate::nn::layers::{dropout_mask, init_uniform};
use crate::nn::{Adam, AdamConfig, LayerNormParams, Linear, Mat, ParamId, ParamSet, Tape, Var};

pub const LOG_SCALE_MIN: f64 = -5.0;
pub const LOG_SCALE_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeliefMode {
    Mse,
    Mle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub max_delay: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_width: usize,
    pub dropout: f64,
    pub mode: BeliefMode,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
}

impl TransformerConfig {
    pub fn new(state_dim: usize, action_dim: usize, max_delay: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            max_delay,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ff_width: 256,
            dropout: 0.1,
            mode: BeliefMode::Mse,
            lr: 1e-4,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 || self.d_model == 0 || self.n_layers == 0 {
            return Err(Error::Config("transformer dimensions must be positive".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    fn out_dim(&self) -> usize {
        match self.mode {
            BeliefMode::Mse => self.state_dim,
            BeliefMode::Mle => 2 * self.state_dim,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNormParams,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNormParams,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
pub struct TransformerBelief {
    cfg: TransformerConfig,
    params: ParamSet,
    opt: Adam,
    state_emb: Linear,
    action_emb: Linear,
    mask_token: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNormParams,
    head: Linear,
}

/// Raw per-slot outputs for each window (all `W` slots, masked included).
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefOutput {
    pub means: Vec<Vec<Vec<f64>>>,
    pub log_scales: Option<Vec<Vec<Vec<f64>>>>,
}

/// Batch laid out as `B * (W + 1)` token rows.
struct Prepared {
    batch: usize,
    seq: usize,
    obs: Mat,
    actions: Mat,
    /// Slots past a window's end are filler; causality keeps them from
    /// reaching any real position.
    masked: Vec<bool>,
}

struct Outputs {
    mean: Var,
    log_scale: Option<Var>,
}

impl TransformerBelief {
    pub fn new(cfg: TransformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut ps = ParamSet::new();
        let state_emb = Linear::new(&mut ps, "embed.state", cfg.state_dim, d, rng);
        let action_emb = Linear::new(&mut ps, "embed.action", cfg.action_dim, d, rng);
        let mask_token = ps.add("embed.mask", init_uniform(1, d, d, rng));
        let pos = ps.add("embed.pos", init_uniform(cfg.max_delay + 1, d, d, rng));
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let n = |s: &str| format!("block{l}.{s}");
                Block {
                    ln1: LayerNormParams::new(&mut ps, &n("ln1"), d),
                    q: Linear::new(&mut ps, &n("q"), d, d, rng),
                    k: Linear::new(&mut ps, &n("k"), d, d, rng),
                    v: Linear::new(&mut ps, &n("v"), d, d, rng),
                    o: Linear::new(&mut ps, &n("o"), d, d, rng),
                    ln2: LayerNormParams::new(&mut ps, &n("ln2"), d),
                    ff1: Linear::new(&mut ps, &n("ff1"), d, cfg.ff_width, rng),
                    ff2: Linear::new(&mut ps, &n("ff2"), cfg.ff_width, d, rng),
                }
            })
            .collect();
        let ln_f = LayerNormParams::new(&mut ps, "ln_f", d);
        let head = Linear::new(&mut ps, "head", d, cfg.out_dim(), rng);
        let opt = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                beta1: cfg.betas.0,
                beta2: cfg.betas.1,
                eps: 1e-8,
                weight_decay: cfg.weight_decay,
                max_grad_norm: Some(1.0),
            },
            &ps,
        );
        Ok(Self {
            cfg,
            params: ps,
            opt,
            state_emb,
            action_emb,
            mask_token,
            pos,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.opt.cfg.lr = lr;
    }

    fn prepare(&self, windows: &[MaskedWindow]) -> Result<Prepared> {
        if windows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for w in windows {
            validate_window(w, self.cfg.state_dim, self.cfg.action_dim, self.cfg.max_delay)?;
        }
        let w_max = windows.iter().map(MaskedWindow::len).max().unwrap_or(0);
        let b = windows.len();
        let (ds, da) = (self.cfg.state_dim, self.cfg.action_dim);
        let mut obs = Mat::zeros(b, ds);
        let mut actions = Mat::zeros(b * w_max.max(1), da);
        let mut masked = vec![true; b * w_max];
        for (i, w) in windows.iter().enumerate() {
            for j in 0..ds {
                obs[(i, j)] = w.obs[j];
            }
            for (k, a) in w.actions.iter().enumerate() {
                for j in 0..da {
                    actions[(i * w_max + k, j)] = a[j];
                }
                masked[i * w_max + k] = k < w.n_masked;
            }
        }
        Ok(Prepared {
            batch: b,
            seq: w_max + 1,
            obs,
            actions,
            masked,
        })
    }

    fn forward(&self, tape: &mut Tape, ps: &ParamSet, p: &Prepared, mut rng: Option<&mut ChaCha8Rng>) -> Outputs {
        let (b, seq, w) = (p.batch, p.seq, p.seq - 1);
        let rate = self.cfg.dropout;
        let obs = tape.constant(p.obs.clone());
        let se = self.state_emb.forward(tape, ps, obs);
        let act = tape.constant(p.actions.clone());
        let ae = self.action_emb.forward(tape, ps, act);
        let mask = tape.param(ps, self.mask_token);
        let mut index = Vec::with_capacity(b * seq);
        for i in 0..b {
            index.push((0, i));
            for k in 0..w {
                let r = i * w + k;
                index.push(if p.masked[r] { (2, 0) } else { (1, r) });
            }
        }
        let tokens = tape.gather_rows(&[se, ae, mask], index);
        let pos_param = tape.param(ps, self.pos);
        let pos = tape.gather_rows(&[pos_param], (0..b * seq).map(|r| (0, r % seq)).collect());
        let mut x = tape.add(tokens, pos);
        let mut drop = |tape: &mut Tape, v: Var| -> Var {
            match rng.as_deref_mut() {
                Some(r) if rate > 0.0 => {
                    let (nr, nc) = tape.value(v).shape();
                    let m = dropout_mask(nr, nc, rate, r);
                    tape.mul_const(v, m)
                }
                _ => v,
            }
        };
        for blk in &self.blocks {
            let h = blk.ln1.forward(tape, ps, x);
            let q = blk.q.forward(tape, ps, h);
            let k = blk.k.forward(tape, ps, h);
            let v = blk.v.forward(tape, ps, h);
            let att = tape.causal_attention(q, k, v, b, seq, self.cfg.n_heads);
            let o = blk.o.forward(tape, ps, att);
            let o = drop(tape, o);
            x = tape.add(x, o);
            let h = blk.ln2.forward(tape, ps, x);
            let f = blk.ff1.forward(tape, ps, h);
            let f = tape.gelu(f);
            let f = drop(tape, f);
            let f = blk.ff2.forward(tape, ps, f);
            let f = drop(tape, f);
            x = tape.add(x, f);
        }
        let h = self.ln_f.forward(tape, ps, x);
        let out = self.head.forward(tape, ps, h);
        let ds = self.cfg.state_dim;
        let delta = tape.slice_cols(out, 0, ds);
        let obs_rows = tape.gather_rows(&[obs], (0..b * seq).map(|r| (0, r / seq)).collect());
        let mean = tape.add(obs_rows, delta);
        let log_scale = match self.cfg.mode {
            BeliefMode::Mse => None,
            BeliefMode::Mle => {
                let raw = tape.slice_cols(out, ds, ds);
                Some(tape.clamp(raw, LOG_SCALE_MIN, LOG_SCALE_MAX))
            }
        };
        Outputs { mean, log_scale }
    }

    /// Per-slot predictions for every window (masked slots included).
    pub fn belief_forward(&self, windows: &[MaskedWindow]) -> Result<BeliefOutput> {
        let p = self.prepare(windows)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &self.params, &p, None);
        let collect = |v: Var| -> Vec<Vec<Vec<f64>>> {
            let m = tape.value(v);
            windows
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    (0..w.len())
                        .map(|k| {
                            let r = i * p.seq + 1 + k;
                            m.row(r).iter().copied().collect()
                        })
                        .collect()
                })
                .collect()
        };
        Ok(BeliefOutput {
            means: collect(out.mean),
            log_scales: out.log_scale.map(collect),
        })
    }

    fn last_rows(&self, windows: &[MaskedWindow], with_scale: bool) -> Result<(Vec<Vec<f64>>, Option<Vec<Vec<f64>>>)> {
        let p = self.prepare(windows)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &self.params, &p, None);
        let mean = tape.value(out.mean);
        let mut means = Vec::with_capacity(windows.len());
        let mut scales = Vec::with_capacity(windows.len());
        for (i, w) in windows.iter().enumerate() {
            if w.effective_delay() == 0 {
                means.push(w.obs.clone());
                scales.push(vec![f64::NEG_INFINITY; self.cfg.state_dim]);
                continue;
            }
            let r = i * p.seq + w.len();
            means.push(mean.row(r).iter().copied().collect());
            if let (true, Some(ls)) = (with_scale, out.log_scale) {
                scales.push(tape.value(ls).row(r).iter().copied().collect());
            }
        }
        Ok((means, with_scale.then_some(scales)))
    }

    fn loss_on_tape(&self, tape: &mut Tape, ps: &ParamSet, batch: &BeliefBatch, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        batch.validate(self.cfg.state_dim, self.cfg.action_dim, self.cfg.max_delay)?;
        let p = self.prepare(&batch.windows)?;
        let out = self.forward(tape, ps, &p, rng);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, (w, ls)) in batch.windows.iter().zip(&batch.labels).enumerate() {
            let first = 1 + w.n_masked;
            for (k, l) in ls.iter().enumerate() {
                rows.push((0, i * p.seq + first + k));
                labels.push(l.clone());
            }
        }
        if rows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let ds = self.cfg.state_dim;
        let y = tape.constant(Mat::from_fn(labels.len(), ds, |i, j| labels[i][j]));
        let mu = tape.gather_rows(&[out.mean], rows.clone());
        let diff = tape.sub(mu, y);
        Ok(match out.log_scale {
            None => {
                let sq = tape.square(diff);
                tape.mean(sq)
            }
            Some(ls) => {
                let ls = tape.gather_rows(&[ls], rows);
                let neg = tape.scale(ls, -1.0);
                let inv = tape.exp(neg);
                let z = tape.mul(diff, inv);
                let z2 = tape.square(z);
                let half = tape.scale(z2, 0.5);
                let nll = tape.add(half, ls);
                let m = tape.mean(nll);
                let c = tape.constant(Mat::from_element(1, 1, 0.5 * (2.0 * std::f64::consts::PI).ln()));
                tape.add(m, c)
            }
        })
    }
}

impl BeliefPredictor for TransformerBelief {
    fn state_dim(&self) -> usize {
        self.cfg.state_dim
    }

    fn max_delay(&self) -> usize {
        self.cfg.max_delay
    }

    fn predict(&self, windows: &[MaskedWindow]) -> Result<Vec<Vec<f64>>> {
        Ok(self.last_rows(windows, false)?.0)
    }

    /// In likelihood mode one state is drawn from the predicted Gaussian.
    fn predict_for_learning(&self, windows: &[MaskedWindow], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        match self.cfg.mode {
            BeliefMode::Mse => self.predict(windows),
            BeliefMode::Mle => {
                let (means, scales) = self.last_rows(windows, true)?;
                let scales = scales.expect("requested");
                Ok(means
                    .into_iter()
                    .zip(scales)
                    .map(|(m, s)| {
                        m.iter()
                            .zip(&s)
                            .map(|(mu, ls)| {
                                let z: f64 = rng.sample(StandardNormal);
                                mu + ls.exp() * z
                            })
                            .collect()
                    })
                    .collect())
            }
        }
    }
}

impl LearnedBelief for TransformerBelief {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn loss(&self, batch: &BeliefBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.loss_on_tape(&mut tape, &self.params, batch, None)?;
        Ok(tape.scalar(l))
    }

    fn loss_and_grads(&self, params: &ParamSet, batch: &BeliefBatch, rng: Option<&mut ChaCha8Rng>) -> Result<(f64, Vec<Mat>)> {
        let mut tape = Tape::new();
        let l = self.loss_on_tape(&mut tape, params, batch, rng)?;
        Ok((tape.scalar(l), tape.backward(l).for_set(params)))
    }

    fn params_and_optimizer(&mut self) -> (&mut ParamSet, &mut Adam) {
        (&mut self.params, &mut self.opt)
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "transformer", "config": self.cfg })
    }
}
