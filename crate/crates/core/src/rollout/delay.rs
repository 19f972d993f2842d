//! Per-step delay samplers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DelayKind {
    Deterministic,
    Uniform,
    Gaussian,
    Exponential,
    Binomial,
}

impl std::str::FromStr for DelayKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(DelayKind::Deterministic),
            "uniform" => Ok(DelayKind::Uniform),
            "gaussian" => Ok(DelayKind::Gaussian),
            "exponential" => Ok(DelayKind::Exponential),
            "binomial" => Ok(DelayKind::Binomial),
            other => Err(Error::Config(format!("unknown delay kind {other:?}"))),
        }
    }
}

/// Delay distribution on `{1, .., max_delay}` (or the constant `max_delay`,
/// which may be 0, for the deterministic kind).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayProcess {
    pub kind: DelayKind,
    pub max_delay: usize,
    /// Target mean for the mean-matched kinds.
    pub mean: f64,
    /// Fitted shape: gaussian location, exponential rate, binomial success
    /// probability; unused otherwise.
    pub param: f64,
    /// Draws that fell outside `[1, max_delay]` before clamping.
    #[serde(skip)]
    pub clamped: u64,
    #[serde(skip)]
    pub draws: u64,
}

fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Complementary error function (Chebyshev fit, relative error < 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let r = t * poly.exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// Mean of `clamp(round(X), 1, max)` given the CDF of `X`.
fn clamped_rounded_mean(max: usize, cdf: impl Fn(f64) -> f64) -> f64 {
    let mut mean = 0.0;
    for k in 1..=max {
        let lo = if k == 1 { 0.0 } else { cdf(k as f64 - 0.5) };
        let hi = if k == max { 1.0 } else { cdf(k as f64 + 0.5) };
        mean += k as f64 * (hi - lo);
    }
    mean
}

/// Bisection for an increasing function `f` on `[lo, hi]`.
fn bisect(mut lo: f64, mut hi: f64, target: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

impl DelayProcess {
    pub fn deterministic(delay: usize) -> Self {
        Self {
            kind: DelayKind::Deterministic,
            max_delay: delay,
            mean: delay as f64,
            param: 0.0,
            clamped: 0,
            draws: 0,
        }
    }

    /// `U{1, .., k}`
    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(DelayKind::Uniform, k, (k as f64 + 1.0) / 2.0)
    }

    pub fn new(kind: DelayKind, max_delay: usize, mean: f64) -> Result<Self> {
        if kind == DelayKind::Deterministic {
            return Ok(Self::deterministic(max_delay));
        }
        if max_delay == 0 {
            return Err(Error::Config("stochastic delay needs max_delay >= 1".into()));
        }
        let m = max_delay as f64;
        if kind != DelayKind::Uniform && !(mean > 1.0 && mean < m) {
            return Err(Error::Config(format!(
                "mean delay {mean} must lie strictly between 1 and max_delay {max_delay}"
            )));
        }
        let sigma = m / 4.0;
        let param = match kind {
            DelayKind::Deterministic | DelayKind::Uniform => 0.0,
            DelayKind::Gaussian => bisect(-4.0 * m, 5.0 * m, mean, |mu| {
                clamped_rounded_mean(max_delay, |x| phi((x - mu) / sigma))
            }),
            // Larger rates give smaller means, so bisect on the negated rate.
            DelayKind::Exponential => -bisect(-50.0, -1e-6, mean, |neg| {
                clamped_rounded_mean(max_delay, |x| 1.0 - (neg * x).exp())
            }),
            DelayKind::Binomial => mean / m,
        };
        let mean = if kind == DelayKind::Uniform { (m + 1.0) / 2.0 } else { mean };
        Ok(Self {
            kind,
            max_delay,
            mean,
            param,
            clamped: 0,
            draws: 0,
        })
    }

    pub fn is_stochastic(&self) -> bool {
        self.kind != DelayKind::Deterministic
    }

    pub fn sample(&mut self, rng: &mut ChaCha8Rng) -> usize {
        let max = self.max_delay;
        let raw: i64 = match self.kind {
            DelayKind::Deterministic => return max,
            DelayKind::Uniform => rng.random_range(1..=max) as i64,
            DelayKind::Gaussian => {
                let n = Normal::new(self.param, max as f64 / 4.0).expect("positive scale");
                n.sample(rng).round() as i64
            }
            DelayKind::Exponential => {
                let e = Exp::new(self.param).expect("positive rate");
                e.sample(rng).round() as i64
            }
            DelayKind::Binomial => {
                let b = Binomial::new(max as u64, self.param).expect("probability in [0,1]");
                b.sample(rng) as i64
            }
        };
        self.draws += 1;
        if raw < 1 || raw > max as i64 {
            self.clamped += 1;
        }
        raw.clamp(1, max as i64) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erfc_reference_values() {
        assert!((erfc(0.0) - 1.0).abs() < 1e-7);
        assert!((erfc(1.0) - 0.157_299_207_050_285_1).abs() < 1e-7);
        assert!((erfc(-0.5) - 1.520_499_877_813_046_5).abs() < 1e-7);
    }

    #[test]
    fn fitted_means_match_targets() {
        for kind in [DelayKind::Gaussian, DelayKind::Exponential] {
            let p = DelayProcess::new(kind, 16, 8.0).unwrap();
            let m = match kind {
                DelayKind::Gaussian => clamped_rounded_mean(16, |x| phi((x - p.param) / 4.0)),
                _ => clamped_rounded_mean(16, |x| 1.0 - (-p.param * x).exp()),
            };
            assert!((m - 8.0).abs() < 1e-6, "{kind:?}: {m}");
        }
    }
}
