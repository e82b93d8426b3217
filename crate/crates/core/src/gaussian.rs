//! Diagonal Gaussians: estimation, streaming moments, KL divergence, sampling.

use std::num::NonZeroUsize;

use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CbsError, Result};

/// Lower bound on every per-dimension variance. Keeps the KL finite when a
/// selected set has one or two members.
pub const DEFAULT_VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: u64,
}

impl DiagonalGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Two-pass population estimate (divide by n), variances clamped to `var_floor`.
    pub fn estimate<'a, I>(vectors: I, var_floor: f64) -> Result<DiagonalGaussian>
    where
        I: IntoIterator<Item = &'a [f64]>,
        I::IntoIter: Clone,
    {
        let iter = vectors.into_iter();
        let mut mean: Vec<f64> = Vec::new();
        let mut n = 0u64;
        for v in iter.clone() {
            if n == 0 {
                mean = vec![0.0; v.len()];
            } else if v.len() != mean.len() {
                return Err(CbsError::DimensionMismatch {
                    expected: mean.len(),
                    found: v.len(),
                    row: Some(n as usize),
                });
            }
            mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
            n += 1;
        }
        if n == 0 {
            return Err(CbsError::EmptyInput);
        }
        let nf = n as f64;
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![0.0; mean.len()];
        for v in iter {
            for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
                let d = x - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s = (*s / nf).max(var_floor));
        Ok(DiagonalGaussian {
            mean,
            var,
            count: n,
        })
    }

    /// `k` independent draws, component `d` from `Normal(mean[d], var[d])`.
    pub fn sample<R: rand::Rng + ?Sized>(&self, k: NonZeroUsize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..k.get())
            .map(|_| {
                self.mean
                    .iter()
                    .zip(&self.var)
                    .map(|(m, v)| {
                        let z: f64 = rng.sample(StandardNormal);
                        m + v.sqrt() * z
                    })
                    .collect()
            })
            .collect()
    }
}

/// `KL(p || q)` between diagonal Gaussians. `p` is the reference (the whole
/// cluster or class), `q` the candidate estimate (the selected set).
pub fn kl_divergence(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(CbsError::DimensionMismatch {
            expected: p.dim(),
            found: q.dim(),
            row: None,
        });
    }
    Ok(kl_terms(&p.mean, &p.var, &q.mean, &q.var))
}

#[inline]
fn kl_term(p_mean: f64, p_var: f64, q_mean: f64, q_var: f64) -> f64 {
    let diff = q_mean - p_mean;
    p_var / q_var + diff * diff / q_var + (q_var / p_var).ln() - 1.0
}

pub(crate) fn kl_terms(p_mean: &[f64], p_var: &[f64], q_mean: &[f64], q_var: &[f64]) -> f64 {
    let mut total = 0.0;
    for d in 0..p_mean.len() {
        total += kl_term(p_mean[d], p_var[d], q_mean[d], q_var[d]);
    }
    0.5 * total
}

/// Running sum and sum of squares, so adding or removing one vector and
/// re-finalizing costs O(D).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    n: u64,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        MomentAccumulator {
            n: 0,
            sum: vec![0.0; dim],
            sumsq: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(CbsError::DimensionMismatch {
                expected: self.dim(),
                found: v.len(),
                row: None,
            });
        }
        Ok(())
    }

    pub fn push(&mut self, v: &[f64]) -> Result<()> {
        self.check_dim(v)?;
        for ((s, q), x) in self.sum.iter_mut().zip(self.sumsq.iter_mut()).zip(v) {
            *s += x;
            *q += x * x;
        }
        self.n += 1;
        Ok(())
    }

    /// Removes a vector that was previously pushed. Popping something that
    /// was never pushed is not detected.
    pub fn pop(&mut self, v: &[f64]) -> Result<()> {
        self.check_dim(v)?;
        if self.n == 0 {
            return Err(CbsError::EmptyAccumulator);
        }
        for ((s, q), x) in self.sum.iter_mut().zip(self.sumsq.iter_mut()).zip(v) {
            *s -= x;
            *q -= x * x;
        }
        self.n -= 1;
        if self.n == 0 {
            self.sum.iter_mut().for_each(|s| *s = 0.0);
            self.sumsq.iter_mut().for_each(|s| *s = 0.0);
        }
        Ok(())
    }

    pub fn finalize(&self, var_floor: f64) -> Result<DiagonalGaussian> {
        if self.n == 0 {
            return Err(CbsError::EmptyAccumulator);
        }
        let nf = self.n as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / nf).collect();
        let var = self
            .sumsq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / nf - m * m).max(var_floor))
            .collect();
        Ok(DiagonalGaussian {
            mean,
            var,
            count: self.n,
        })
    }

    /// `KL(reference || P(S ∪ {candidate}))` without mutating the accumulator.
    pub fn kl_with_candidate(
        &self,
        reference: &DiagonalGaussian,
        candidate: &[f64],
        var_floor: f64,
    ) -> f64 {
        let nf = (self.n + 1) as f64;
        let mut total = 0.0;
        for (d, &x) in candidate.iter().enumerate().take(self.sum.len()) {
            let mean = (self.sum[d] + x) / nf;
            let var = ((self.sumsq[d] + x * x) / nf - mean * mean).max(var_floor);
            total += kl_term(reference.mean[d], reference.var[d], mean, var);
        }
        0.5 * total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    const FLOOR: f64 = DEFAULT_VAR_FLOOR;

    fn g(mean: &[f64], var: &[f64]) -> DiagonalGaussian {
        DiagonalGaussian {
            mean: mean.to_vec(),
            var: var.to_vec(),
            count: 1,
        }
    }

    fn est(vs: &[Vec<f64>]) -> DiagonalGaussian {
        DiagonalGaussian::estimate(vs.iter().map(Vec::as_slice), FLOOR).unwrap()
    }

    #[test]
    fn estimate_examples() {
        let a = est(&[vec![0.0, 0.0], vec![2.0, 0.0]]);
        assert_eq!(a.mean, vec![1.0, 0.0]);
        assert_eq!(a.var, vec![1.0, FLOOR]);
        assert_eq!(a.count, 2);

        let b = est(&[vec![5.0, 5.0]]);
        assert_eq!(b.mean, vec![5.0, 5.0]);
        assert_eq!(b.var, vec![FLOOR, FLOOR]);

        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(
            DiagonalGaussian::estimate(empty.iter().map(Vec::as_slice), FLOOR),
            Err(CbsError::EmptyInput)
        ));
    }

    #[test]
    fn estimate_variance_of_normal_draws() {
        // Var(σ̂²) = 2σ⁴(n−1)/n² = 2·16·999/10⁶ ≈ 0.03197, sd ≈ 0.1788, 3sd ≈ 0.536 < 0.6.
        let source = g(&[0.0, 0.0, 0.0], &[4.0, 4.0, 4.0]);
        let mut r = rng::stream(11, "test", 0);
        let draws = source.sample(NonZeroUsize::new(1000).unwrap(), &mut r);
        let fit = est(&draws);
        for v in &fit.var {
            assert!((v - 4.0).abs() < 0.6, "variance {v}");
        }
    }

    #[test]
    fn kl_closed_forms() {
        let p = g(&[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let a = kl_divergence(&g(&[0.0], &[1.0]), &g(&[1.0], &[1.0])).unwrap();
        assert!((a - 0.5).abs() <= 1e-12);
        let b = kl_divergence(&g(&[0.0], &[1.0]), &g(&[0.0], &[4.0])).unwrap();
        let expected = 0.5 * (0.25 + 4f64.ln() - 1.0);
        assert!((b - expected).abs() <= 1e-12);
        assert!((b - 0.31815).abs() < 1e-5);
    }

    #[test]
    fn kl_is_not_symmetric() {
        let p = g(&[0.0], &[1.0]);
        let q = g(&[0.0], &[4.0]);
        let forward = kl_divergence(&p, &q).unwrap();
        let backward = kl_divergence(&q, &p).unwrap();
        assert!((forward - backward).abs() > 0.1);
    }

    #[test]
    fn kl_dimension_mismatch() {
        assert!(matches!(
            kl_divergence(&g(&[0.0], &[1.0]), &g(&[0.0, 0.0], &[1.0, 1.0])),
            Err(CbsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn accumulator_examples() {
        let mut acc = MomentAccumulator::new(2);
        acc.push(&[2.0, 0.0]).unwrap();
        acc.push(&[0.0, 0.0]).unwrap();
        let fit = acc.finalize(FLOOR).unwrap();
        assert_eq!(fit.mean, vec![1.0, 0.0]);
        assert_eq!(fit, est(&[vec![2.0, 0.0], vec![0.0, 0.0]]));

        let mut a = MomentAccumulator::new(2);
        a.push(&[0.3, 0.7]).unwrap();
        a.pop(&[0.3, 0.7]).unwrap();
        a.push(&[0.1, 0.9]).unwrap();
        let mut b = MomentAccumulator::new(2);
        b.push(&[0.1, 0.9]).unwrap();
        assert_eq!(a, b);

        assert!(matches!(
            MomentAccumulator::new(3).finalize(FLOOR),
            Err(CbsError::EmptyAccumulator)
        ));
    }

    #[test]
    fn accumulator_matches_two_pass_on_fifty_vectors() {
        let mut r = rng::stream(5, "test", 0);
        let vs: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..6).map(|_| r.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let mut acc = MomentAccumulator::new(6);
        vs.iter().for_each(|v| acc.push(v).unwrap());
        let a = acc.finalize(FLOOR).unwrap();
        let b = est(&vs);
        for d in 0..6 {
            assert!((a.mean[d] - b.mean[d]).abs() <= 1e-9);
            assert!((a.var[d] - b.var[d]).abs() <= 1e-9);
        }
    }

    #[test]
    fn kl_with_candidate_matches_push_then_finalize() {
        let mut r = rng::stream(9, "test", 0);
        let vs: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..4).map(|_| r.random::<f64>()).collect())
            .collect();
        let reference = est(&vs);
        let mut acc = MomentAccumulator::new(4);
        acc.push(&vs[0]).unwrap();
        acc.push(&vs[1]).unwrap();
        let fast = acc.kl_with_candidate(&reference, &vs[2], FLOOR);
        acc.push(&vs[2]).unwrap();
        let slow = kl_divergence(&reference, &acc.finalize(FLOOR).unwrap()).unwrap();
        assert!((fast - slow).abs() <= 1e-12);
    }

    #[test]
    fn sample_examples() {
        let narrow = g(&[0.0], &[FLOOR]);
        let mut r = rng::stream(1, "test", 0);
        let x = narrow.sample(NonZeroUsize::new(1).unwrap(), &mut r);
        assert!(x[0][0].abs() <= 6.0 * FLOOR.sqrt());

        let wide = g(&[3.0], &[1.0]);
        let a = wide.sample(
            NonZeroUsize::new(5).unwrap(),
            &mut rng::stream(2, "test", 0),
        );
        let b = wide.sample(
            NonZeroUsize::new(5).unwrap(),
            &mut rng::stream(2, "test", 0),
        );
        assert_eq!(a, b);

        // 3σ/√n = 3/100
        let many = wide.sample(
            NonZeroUsize::new(10_000).unwrap(),
            &mut rng::stream(3, "test", 0),
        );
        let mean = many.iter().map(|v| v[0]).sum::<f64>() / 10_000.0;
        assert!((mean - 3.0).abs() < 0.03, "mean {mean}");
    }

    fn arb_gaussian(dim: usize) -> impl Strategy<Value = DiagonalGaussian> {
        (
            prop::collection::vec(-5.0f64..5.0, dim),
            prop::collection::vec(FLOOR..10.0, dim),
        )
            .prop_map(|(mean, var)| DiagonalGaussian {
                mean,
                var,
                count: 1,
            })
    }

    proptest! {
        #[test]
        fn kl_self_is_zero(p in arb_gaussian(5)) {
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn kl_nonnegative(p in arb_gaussian(4), q in arb_gaussian(4)) {
            prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        }

        #[test]
        fn kl_additive_over_dimensions(p in arb_gaussian(2), q in arb_gaussian(2)) {
            let marginal = |x: &DiagonalGaussian, d: usize| g(&[x.mean[d]], &[x.var[d]]);
            let joint = kl_divergence(&p, &q).unwrap();
            let split = kl_divergence(&marginal(&p, 0), &marginal(&q, 0)).unwrap()
                + kl_divergence(&marginal(&p, 1), &marginal(&q, 1)).unwrap();
            prop_assert!((joint - split).abs() <= 1e-12 * joint.abs().max(1.0));
        }

        #[test]
        fn push_pop_interleaving_matches_two_pass(
            seed in any::<u64>(),
            ops in prop::collection::vec(any::<bool>(), 1..60),
        ) {
            let mut r = rng::stream(seed, "test", 0);
            let mut live: Vec<Vec<f64>> = Vec::new();
            let mut acc = MomentAccumulator::new(3);
            for push in ops {
                if push || live.is_empty() {
                    let v: Vec<f64> = (0..3).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
                    acc.push(&v).unwrap();
                    live.push(v);
                } else {
                    live.shuffle(&mut r);
                    let v = live.pop().unwrap();
                    acc.pop(&v).unwrap();
                }
            }
            if !live.is_empty() {
                let a = acc.finalize(FLOOR).unwrap();
                let b = est(&live);
                for d in 0..3 {
                    prop_assert!((a.mean[d] - b.mean[d]).abs() <= 1e-9);
                    prop_assert!((a.var[d] - b.var[d]).abs() <= 1e-9);
                }
            }
        }
    }
}
