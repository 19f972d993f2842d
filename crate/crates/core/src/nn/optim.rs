//! Adaptive-moment optimizers with optional decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::tape::{Mat, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW); 0 gives plain Adam.
    pub weight_decay: f64,
    /// Global-norm gradient clipping; `None` disables it.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Mat> = params
            .values()
            .iter()
            .map(|p| Mat::zeros(p.nrows(), p.ncols()))
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut ParamSet, mut grads: Vec<Mat>) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: params.len(),
                got: grads.len(),
            });
        }
        let norm = match self.cfg.max_grad_norm {
            Some(max) => clip_global_norm(&mut grads, max),
            None => grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt(),
        };
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                step: self.t as usize,
                what: "gradient norm".into(),
            });
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .values_mut()
            .iter_mut()
            .zip(&grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = &*m * c.beta1 + g * (1.0 - c.beta1);
            *v = &*v * c.beta2 + g.component_mul(g) * (1.0 - c.beta2);
            if c.lr == 0.0 {
                continue;
            }
            if c.weight_decay > 0.0 {
                *p *= 1.0 - c.lr * c.weight_decay;
            }
            for i in 0..p.len() {
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Mat::from_element(1, 2, 3.0));
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            &ps,
        );
        for _ in 0..2000 {
            let g = ps.get(id) * 2.0;
            opt.step(&mut ps, vec![g]).unwrap();
        }
        assert!(ps.get(id).amax() < 1e-3);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut ps = ParamSet::new();
        ps.add("x", Mat::from_element(2, 2, 0.7));
        let before = ps.clone();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.0,
                weight_decay: 1e-2,
                ..Default::default()
            },
            &ps,
        );
        opt.step(&mut ps, vec![Mat::from_element(2, 2, 1.0)]).unwrap();
        assert_eq!(ps, before);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![Mat::from_element(1, 1, 3.0), Mat::from_element(1, 1, 4.0)];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let n: f64 = g.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-15);
    }
}
