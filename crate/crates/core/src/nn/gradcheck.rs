//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::tape::{Mat, ParamSet};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
/// Gradients below this magnitude on both sides count as agreeing zeros.
pub const ZERO_FLOOR: f64 = 1e-8;
/// Denominator floor for relative errors; keeps roundoff on tiny gradients
/// from dominating the ratio.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries: Vec<GradCheckEntry>,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    if a.abs() < ZERO_FLOOR && n.abs() < ZERO_FLOOR {
        return 0.0;
    }
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares `loss`'s analytic gradient against central differences on
/// `n_sampled` scalar parameters drawn without replacement.
pub fn gradient_check<R, F>(params: &ParamSet, n_sampled: usize, rng: &mut R, loss: F) -> Result<GradCheckReport>
where
    R: Rng + ?Sized,
    F: Fn(&ParamSet) -> Result<(f64, Vec<Mat>)>,
{
    let (_, analytic) = loss(params)?;
    let total = params.n_scalars();
    let picks = sample(rng, total, n_sampled.min(total));
    let mut offsets = Vec::with_capacity(params.len());
    let mut acc = 0;
    for v in params.values() {
        offsets.push(acc);
        acc += v.len();
    }
    let mut work = params.clone();
    let mut entries = Vec::new();
    for flat in picks.iter() {
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        let i = flat - offsets[p];
        let orig = work.values()[p][i];
        work.values_mut()[p][i] = orig + FD_STEP;
        let (plus, _) = loss(&work)?;
        work.values_mut()[p][i] = orig - FD_STEP;
        let (minus, _) = loss(&work)?;
        work.values_mut()[p][i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[p][i];
        entries.push(GradCheckEntry {
            name: params.names()[p].clone(),
            index: i,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    let max_rel_error = entries.iter().fold(0.0f64, |m, e| m.max(e.rel_error));
    Ok(GradCheckReport {
        max_rel_error,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_head_is_exact() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Mat::from_fn(3, 2, |i, j| 0.3 * i as f64 - 0.2 * j as f64 + 0.1));
        let x = Mat::from_fn(4, 3, |i, j| ((i + 2 * j) as f64).cos());
        let y = Mat::from_fn(4, 2, |i, j| ((i * j) as f64).sin());
        let loss = |p: &ParamSet| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.param(p, w);
            let yv = t.constant(y.clone());
            let h = t.matmul(xv, wv);
            let d = t.sub(h, yv);
            let sq = t.square(d);
            let l = t.mean(sq);
            Ok((t.scalar(l), t.backward(l).for_set(p)))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rep = gradient_check(&ps, 6, &mut rng, loss).unwrap();
        assert_eq!(rep.entries.len(), 6);
        assert!(rep.max_rel_error < 1e-7, "{rep:?}");
    }
}
