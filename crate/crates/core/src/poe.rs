//! Product-of-experts form of the linear adjustment, computed directly in
//! probability space:
//!
//! ```text
//! Q(v) = P(v) * (q(v) / p(v))^alpha / Z
//! ```
//!
//! This is an independent route to the same distribution that
//! [`linear_adjust`](crate::decode::linear_adjust) followed by a softmax
//! produces in logit space, and is used to check it.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoeError {
    #[error("vectors differ in length")]
    LengthMismatch,
    #[error("not a probability vector: {0}")]
    NotProbability(String),
    #[error("forget-side probability is zero at token {0}")]
    ZeroForgetProb(usize),
    #[error("alpha must be finite and non-negative")]
    InvalidAlpha,
    #[error("normalizer is zero: the experts share no support")]
    ZeroNormalizer,
    #[error("support violation at token {0}: a > 0 where b = 0")]
    Support(usize),
}

/// Non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const SUM_TOLERANCE: f64 = 1e-12;

    pub fn new(values: Vec<f64>) -> Result<Self, PoeError> {
        if let Some(x) = values.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(PoeError::NotProbability(format!("entry {x}")));
        }
        let sum: f64 = values.iter().sum();
        let tolerance = Self::SUM_TOLERANCE * (values.len().max(1) as f64);
        if (sum - 1.0).abs() > tolerance {
            return Err(PoeError::NotProbability(format!("sum {sum}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn poe_distribution(base: &ProbVector, forget: &ProbVector, retain: &ProbVector, alpha: f64) -> Result<ProbVector, PoeError> {
    let n = base.len();
    if forget.len() != n || retain.len() != n {
        return Err(PoeError::LengthMismatch);
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(PoeError::InvalidAlpha);
    }
    if let Some(i) = forget.0.iter().position(|&x| x == 0.0) {
        return Err(PoeError::ZeroForgetProb(i));
    }
    if alpha == 0.0 || forget == retain {
        return Ok(base.clone());
    }
    let log_weights: Vec<f64> = (0..n)
        .map(|v| {
            let (b, p, q) = (base.0[v], forget.0[v], retain.0[v]);
            if b == 0.0 || q == 0.0 {
                f64::NEG_INFINITY
            } else {
                b.ln() + alpha * (q.ln() - p.ln())
            }
        })
        .collect();
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(PoeError::ZeroNormalizer);
    }
    // After subtracting the max the largest weight is exactly 1, so the
    // normalizer is at least 1 and cannot underflow.
    let weights: Vec<f64> = log_weights.iter().map(|&w| (w - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    Ok(ProbVector(weights.into_iter().map(|w| w / z).collect()))
}

/// `sum a ln(a / b)`, with `0 ln 0 = 0`.
pub fn kl_divergence(a: &ProbVector, b: &ProbVector) -> Result<f64, PoeError> {
    if a.len() != b.len() {
        return Err(PoeError::LengthMismatch);
    }
    let mut total = 0.0;
    for (i, (&x, &y)) in a.0.iter().zip(&b.0).enumerate() {
        if x == 0.0 {
            continue;
        }
        if y == 0.0 {
            return Err(PoeError::Support(i));
        }
        total += x * (x / y).ln();
    }
    // Rounding can leave a tiny negative sum for near-identical inputs.
    Ok(total.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::linear_adjust;
    use crate::logits::softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn random_logits(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect()
    }

    #[test]
    fn alpha_zero_returns_base() {
        let base = pv(&[0.2, 0.8]);
        assert_eq!(poe_distribution(&base, &pv(&[0.5, 0.5]), &pv(&[0.9, 0.1]), 0.0).unwrap(), base);
    }

    #[test]
    fn equal_experts_return_base() {
        let base = pv(&[0.2, 0.3, 0.5]);
        let side = pv(&[0.6, 0.3, 0.1]);
        assert_eq!(poe_distribution(&base, &side, &side, 2.5).unwrap(), base);
    }

    #[test]
    fn matches_logit_route_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let (lb, lp, lq) = (random_logits(&mut rng, 50), random_logits(&mut rng, 50), random_logits(&mut rng, 50));
            let via_logits = softmax(&linear_adjust(&lb, &lp, &lq, 0.7).unwrap());
            let (pb, pp, pq) = (pv(&softmax(&lb)), pv(&softmax(&lp)), pv(&softmax(&lq)));
            let via_probs = poe_distribution(&pb, &pp, &pq, 0.7).unwrap();
            for (a, b) in via_logits.iter().zip(via_probs.values()) {
                assert!((a - b).abs() < 1e-9);
            }
            // Probabilities are logits too: feed their logs back through.
            let logs = |p: &ProbVector| p.values().iter().map(|x| x.ln()).collect::<Vec<_>>();
            let back = softmax(&linear_adjust(&logs(&pb), &logs(&pp), &logs(&pq), 0.7).unwrap());
            for (a, b) in back.iter().zip(via_probs.values()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn large_alpha_does_not_overflow() {
        let base = pv(&[0.5, 0.5]);
        let out = poe_distribution(&base, &pv(&[1e-300, 1.0 - 1e-300]), &pv(&[0.5, 0.5]), 30.0).unwrap();
        assert!(out.values().iter().all(|x| x.is_finite()));
        assert!((out.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let a = pv(&[0.5, 0.5]);
        assert_eq!(poe_distribution(&a, &pv(&[1.0, 0.0]), &a, 1.0), Err(PoeError::ZeroForgetProb(1)));
        assert_eq!(poe_distribution(&a, &pv(&[1.0]), &a, 1.0), Err(PoeError::LengthMismatch));
        assert_eq!(poe_distribution(&a, &a, &a, -1.0), Err(PoeError::InvalidAlpha));
        // Disjoint base and retain supports leave nothing to normalize.
        let r = poe_distribution(&pv(&[1.0, 0.0]), &a, &pv(&[0.0, 1.0]), 1.0);
        assert_eq!(r, Err(PoeError::ZeroNormalizer));
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.5, 1.5]).is_err());
    }

    #[test]
    fn kl_values() {
        let a = pv(&[0.3, 0.7]);
        assert_eq!(kl_divergence(&a, &a).unwrap(), 0.0);
        let kl = kl_divergence(&pv(&[1.0, 0.0]), &pv(&[0.5, 0.5])).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(kl_divergence(&pv(&[0.5, 0.5]), &pv(&[1.0, 0.0])), Err(PoeError::Support(1)));
    }

    #[test]
    fn kl_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let a = pv(&softmax(&random_logits(&mut rng, 10)));
            let b = pv(&softmax(&random_logits(&mut rng, 10)));
            assert!(kl_divergence(&a, &b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_from_base_grows_with_alpha() {
        // Empirical: checked on random instances, not a theorem.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let base = pv(&softmax(&random_logits(&mut rng, 20)));
            let p = pv(&softmax(&random_logits(&mut rng, 20)));
            let q = pv(&softmax(&random_logits(&mut rng, 20)));
            let mut last = 0.0;
            for step in 0..=30 {
                let alpha = step as f64;
                let kl = kl_divergence(&poe_distribution(&base, &p, &q, alpha).unwrap(), &base).unwrap();
                assert!(kl + 1e-9 >= last, "alpha {alpha}: {kl} < {last}");
                last = kl;
            }
        }
    }
}
