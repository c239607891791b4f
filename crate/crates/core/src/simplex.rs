//! Points of the probability simplex, loss vectors, and the divergences
//! used to compare risk vectors.
//!
//! Every divergence is in nats. `kl_div` follows the usual conventions
//! `0 ln(0/x) = 0` and `x ln(x/0) = +inf`, encoded with explicit branches so
//! the result never depends on how the platform treats `ln(0)`.

use crate::error::{check_dims, Error, Result};

/// Largest deviation of the coordinate sum from 1 that is silently
/// renormalised.
pub const RENORMALISE_TOLERANCE: f64 = 1e-9;

/// Deviations at or below this are treated as already normalised, so that
/// re-constructing a stored vector is bit-for-bit idempotent.
const EXACT_SUM_TOLERANCE: f64 = 1e-12;

/// A point of the simplex: `M >= 2` nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVector {
    probs: Vec<f64>,
}

impl SimplexVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::TooFewCoordinates(probs.len()));
        }
        for (index, &value) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::InvalidProbability { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        let deviation = (sum - 1.0).abs();
        if deviation > RENORMALISE_TOLERANCE {
            return Err(Error::NotNormalised { sum });
        }
        let probs = if deviation > EXACT_SUM_TOLERANCE {
            probs.into_iter().map(|p| p / sum).collect()
        } else {
            probs
        };
        Ok(Self { probs })
    }

    /// Normalises arbitrary nonnegative weights (e.g. counts).
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(
                "weights must be finite, nonnegative and not all zero".into(),
            ));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(dim: usize) -> Result<Self> {
        Self::new(vec![1.0 / dim as f64; dim])
    }

    pub fn one_hot(dim: usize, index: usize) -> Result<Self> {
        if index >= dim {
            return Err(Error::InvalidArgument(format!(
                "one-hot index {index} out of range for dimension {dim}"
            )));
        }
        let mut probs = vec![0.0; dim];
        probs[index] = 1.0;
        Self::new(probs)
    }

    pub fn dim(&self) -> usize {
        self.probs.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    pub fn get(&self, j: usize) -> f64 {
        self.probs[j]
    }

    /// True when every coordinate is strictly positive.
    pub fn is_interior(&self) -> bool {
        self.probs.iter().all(|&p| p > 0.0)
    }

    /// First zero coordinate, if any.
    pub fn first_zero(&self) -> Option<usize> {
        self.probs.iter().position(|&p| p <= 0.0)
    }

    /// Joint permutation helper: returns `v[perm[0]], v[perm[1]], ...`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_dims(self.dim(), perm.len())?;
        Self::new(perm.iter().map(|&i| self.probs[i]).collect())
    }
}

/// Per-type losses: finite, nonnegative, and not all equal.
#[derive(Debug, Clone, PartialEq)]
pub struct LossVector {
    losses: Vec<f64>,
}

impl LossVector {
    pub fn new(losses: Vec<f64>) -> Result<Self> {
        if losses.len() < 2 {
            return Err(Error::InvalidLoss(format!(
                "need at least 2 entries, got {}",
                losses.len()
            )));
        }
        if let Some(bad) = losses.iter().find(|l| !l.is_finite() || **l < 0.0) {
            return Err(Error::InvalidLoss(format!(
                "entry {bad} is not a finite nonnegative value"
            )));
        }
        if losses.iter().all(|&l| l == losses[0]) {
            return Err(Error::InvalidLoss("all entries are equal".into()));
        }
        Ok(Self { losses })
    }

    pub fn dim(&self) -> usize {
        self.losses.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.losses
    }

    pub fn max(&self) -> f64 {
        self.losses
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_dims(self.dim(), perm.len())?;
        Self::new(perm.iter().map(|&i| self.losses[i]).collect())
    }
}

#[inline]
fn kl_term(q: f64, p: f64) -> f64 {
    if q == 0.0 {
        0.0
    } else if p == 0.0 {
        f64::INFINITY
    } else {
        q * (q / p).ln()
    }
}

pub(crate) fn kl_slices(q: &[f64], p: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&qj, &pj) in q.iter().zip(p) {
        total += kl_term(qj, pj);
        if total == f64::INFINITY {
            return total;
        }
    }
    total.max(0.0)
}

/// `kl(q || p)`; may be `+inf`.
pub fn kl_div(q: &SimplexVector, p: &SimplexVector) -> Result<f64> {
    check_dims(q.dim(), p.dim())?;
    Ok(kl_slices(&q.probs, &p.probs))
}

/// Binary kl between Bernoulli(q) and Bernoulli(p).
pub fn scalar_kl(q: f64, p: f64) -> Result<f64> {
    for (index, value) in [(0, q), (1, p)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidProbability { index, value });
        }
    }
    Ok(kl_slices(&[q, 1.0 - q], &[p, 1.0 - p]))
}

pub fn total_risk(losses: &LossVector, r: &SimplexVector) -> Result<f64> {
    check_dims(losses.dim(), r.dim())?;
    Ok(losses.losses.iter().zip(&r.probs).map(|(l, p)| l * p).sum())
}

pub fn total_variation(q: &SimplexVector, p: &SimplexVector) -> Result<f64> {
    check_dims(q.dim(), p.dim())?;
    let l1: f64 = q
        .probs
        .iter()
        .zip(&p.probs)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok((0.5 * l1).min(1.0))
}

pub fn hellinger(q: &SimplexVector, p: &SimplexVector) -> Result<f64> {
    check_dims(q.dim(), p.dim())?;
    let sq: f64 = q
        .probs
        .iter()
        .zip(&p.probs)
        .map(|(a, b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum();
    Ok((0.5 * sq).sqrt().min(1.0))
}

/// Total-variation bound implied by `kl <= budget`: the smaller of the
/// Pinsker and Bretagnolle–Huber bounds, capped at 1.
pub fn tv_bound_from_kl_budget(budget: f64) -> Result<f64> {
    if budget.is_nan() || budget < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "kl budget must be >= 0, got {budget}"
        )));
    }
    if budget == f64::INFINITY {
        return Ok(1.0);
    }
    let pinsker = (budget / 2.0).sqrt();
    let bretagnolle_huber = (-(-budget).exp_m1()).sqrt();
    Ok(pinsker.min(bretagnolle_huber).min(1.0))
}

/// `H <= sqrt(TV)`.
pub fn hellinger_bound_from_tv(tv: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tv) {
        return Err(Error::InvalidArgument(format!(
            "total variation must lie in [0, 1], got {tv}"
        )));
    }
    Ok(tv.sqrt())
}
