//! The bound constant `I_kl(m, m)` for `M` error types, exactly by
//! enumeration of the compositions of `m` and via the closed Stirling-type
//! upper bound. Everything is computed in log-space.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{check_dims, Error, Result};
use crate::simplex::SimplexVector;

/// Exact mode refuses when `C(m + M - 1, M - 1)` exceeds this.
pub const MAX_EXACT_COMPOSITIONS: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstantMode {
    Exact,
    Stirling,
}

impl ConstantMode {
    /// Exact when the enumeration is small enough, Stirling otherwise.
    pub fn auto(m: u64, num_types: usize) -> Self {
        if composition_count(m, num_types) <= MAX_EXACT_COMPOSITIONS {
            ConstantMode::Exact
        } else {
            ConstantMode::Stirling
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConstantMode::Exact => "exact",
            ConstantMode::Stirling => "stirling",
        }
    }
}

impl std::str::FromStr for ConstantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(ConstantMode::Exact),
            "stirling" => Ok(ConstantMode::Stirling),
            other => Err(Error::InvalidArgument(format!(
                "unknown constant mode '{other}'"
            ))),
        }
    }
}

/// A vector of `M` nonnegative counts summing to `m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Composition {
    counts: Vec<u64>,
}

impl Composition {
    pub fn new(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// `C(m + M - 1, M - 1)` as a float; `inf` on overflow.
pub fn composition_count(m: u64, num_types: usize) -> f64 {
    if num_types == 0 {
        return if m == 0 { 1.0 } else { 0.0 };
    }
    let k = (num_types - 1) as f64;
    let n = m as f64 + k;
    (ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(m as f64 + 1.0))
        .exp()
        .round()
}

/// Streams every composition of `m` into `num_types` parts in colex order
/// (the last coordinate is the most significant), starting from
/// `(m, 0, ..., 0)`.
pub fn enumerate_compositions(m: u64, num_types: usize) -> Compositions {
    let state = if num_types == 0 {
        None
    } else {
        let mut counts = vec![0; num_types];
        counts[0] = m;
        Some(counts)
    };
    Compositions { state }
}

#[derive(Debug, Clone)]
pub struct Compositions {
    state: Option<Vec<u64>>,
}

impl Compositions {
    /// Visits each composition without allocating; `f` sees the counts.
    pub fn for_each_counts<F: FnMut(&[u64])>(mut self, mut f: F) {
        while let Some(counts) = self.state.as_mut() {
            f(counts);
            if !advance(counts) {
                self.state = None;
            }
        }
    }
}

fn advance(counts: &mut [u64]) -> bool {
    let last = counts.len() - 1;
    let Some(i) = counts.iter().position(|&c| c > 0) else {
        return false;
    };
    if i >= last {
        return false;
    }
    let v = counts[i];
    counts[i] = 0;
    counts[0] = v - 1;
    counts[i + 1] += 1;
    true
}

impl Iterator for Compositions {
    type Item = Composition;

    fn next(&mut self) -> Option<Composition> {
        let counts = self.state.as_mut()?;
        let out = Composition::new(counts.clone());
        if !advance(counts) {
            self.state = None;
        }
        Some(out)
    }
}

fn check_feasible(m: u64, num_types: usize) -> Result<()> {
    let count = composition_count(m, num_types);
    if count > MAX_EXACT_COMPOSITIONS {
        Err(Error::InfeasibleEnumeration {
            count,
            limit: MAX_EXACT_COMPOSITIONS,
        })
    } else {
        Ok(())
    }
}

/// `ln Mult(k; m, M, r)`, `-inf` when a positive count meets a zero
/// probability.
pub fn log_multinomial_pmf(k: &Composition, r: &SimplexVector) -> Result<f64> {
    check_dims(r.dim(), k.counts.len())?;
    let m = k.total() as f64;
    let mut log_p = ln_gamma(m + 1.0);
    for (&kj, &rj) in k.counts.iter().zip(r.as_slice()) {
        if kj == 0 {
            continue;
        }
        if rj == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        log_p += kj as f64 * rj.ln() - ln_gamma(kj as f64 + 1.0);
    }
    Ok(log_p)
}

/// Running-max log-sum-exp accumulator.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LogSumExp {
    max: f64,
    scaled: f64,
}

impl LogSumExp {
    pub(crate) fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            scaled: 0.0,
        }
    }

    pub(crate) fn add(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x <= self.max {
            self.scaled += (x - self.max).exp();
        } else {
            self.scaled = self.scaled * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    pub(crate) fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.scaled.ln()
        }
    }
}

/// `ln[(m!/m^m) sum_k prod_j k_j^k_j / k_j!]`.
pub fn log_i_kl_exact(m: u64, num_types: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidArgument("m must be at least 1".into()));
    }
    if num_types < 2 {
        return Err(Error::InvalidArgument("need at least 2 error types".into()));
    }
    check_feasible(m, num_types)?;
    // k ln k - ln k!, with 0 ln 0 = 0
    let table: Vec<f64> = (0..=m)
        .map(|k| {
            let kf = k as f64;
            let k_ln_k = if k == 0 { 0.0 } else { kf * kf.ln() };
            k_ln_k - ln_gamma(kf + 1.0)
        })
        .collect();
    let mut acc = LogSumExp::new();
    enumerate_compositions(m, num_types).for_each_counts(|counts| {
        acc.add(counts.iter().map(|&k| table[k as usize]).sum());
    });
    let mf = m as f64;
    Ok(ln_gamma(mf + 1.0) - mf * mf.ln() + acc.value())
}

/// `ln[sqrt(pi) e^{1/12m} (m/2)^{(M-1)/2} sum_z C(M,z) (pi m)^{-z/2} / Gamma((M-z)/2)]`,
/// valid for `m >= M`.
pub fn log_i_kl_stirling(m: u64, num_types: usize) -> Result<f64> {
    if num_types < 2 {
        return Err(Error::InvalidArgument("need at least 2 error types".into()));
    }
    if m < num_types as u64 {
        return Err(Error::StirlingDomain {
            m,
            types: num_types,
        });
    }
    let mf = m as f64;
    let big_m = num_types as f64;
    let mut acc = LogSumExp::new();
    for z in 0..num_types {
        let zf = z as f64;
        let log_binom = ln_gamma(big_m + 1.0) - ln_gamma(zf + 1.0) - ln_gamma(big_m - zf + 1.0);
        acc.add(log_binom - 0.5 * zf * (PI * mf).ln() - ln_gamma((big_m - zf) / 2.0));
    }
    Ok(0.5 * PI.ln() + 1.0 / (12.0 * mf) + 0.5 * (big_m - 1.0) * (mf / 2.0).ln() + acc.value())
}

/// Log of the bound constant in the requested mode.
pub fn log_i_kl(m: u64, num_types: usize, mode: ConstantMode) -> Result<f64> {
    match mode {
        ConstantMode::Exact => log_i_kl_exact(m, num_types),
        ConstantMode::Stirling => log_i_kl_stirling(m, num_types),
    }
}

/// Both sides of `sum_{k in S>0} prod_j k_j^{-1/2} <= pi^{M/2} m^{(M-2)/2} / Gamma(M/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReciprocalSqrtCheck {
    pub exact_sum: f64,
    pub bound: f64,
}

impl ReciprocalSqrtCheck {
    pub fn holds(&self) -> bool {
        self.exact_sum <= self.bound * (1.0 + 1e-12)
    }
}

pub fn reciprocal_sqrt_sum_check(m: u64, num_types: usize) -> Result<ReciprocalSqrtCheck> {
    if num_types < 1 || m < num_types as u64 {
        return Err(Error::InvalidArgument(format!(
            "need m >= M >= 1 (got m = {m}, M = {num_types})"
        )));
    }
    let slack = m - num_types as u64;
    check_feasible(slack, num_types)?;
    let mut exact_sum = 0.0;
    // strictly positive compositions of m are compositions of m - M shifted by one
    enumerate_compositions(slack, num_types).for_each_counts(|counts| {
        exact_sum += counts
            .iter()
            .map(|&k| 1.0 / ((k + 1) as f64).sqrt())
            .product::<f64>();
    });
    let big_m = num_types as f64;
    let bound = (0.5 * big_m * PI.ln() + 0.5 * (big_m - 2.0) * (m as f64).ln()
        - ln_gamma(big_m / 2.0))
    .exp();
    Ok(ReciprocalSqrtCheck { exact_sum, bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn binom(n: u64, k: u64) -> u64 {
        (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn enumeration_counts_and_uniqueness() {
        let all: Vec<_> = enumerate_compositions(1, 2)
            .map(|c| c.counts().to_vec())
            .collect();
        assert_eq!(all, vec![vec![1, 0], vec![0, 1]]);
        assert_eq!(enumerate_compositions(2, 3).count(), 6);
        assert_eq!(enumerate_compositions(12, 5).count(), 1820);
        for m in 0..8u64 {
            for big_m in 1..5usize {
                let seen: HashSet<Vec<u64>> = enumerate_compositions(m, big_m)
                    .map(|c| c.counts().to_vec())
                    .collect();
                assert_eq!(
                    seen.len() as u64,
                    binom(m + big_m as u64 - 1, big_m as u64 - 1)
                );
                assert!(seen.iter().all(|c| c.iter().sum::<u64>() == m));
                assert_eq!(composition_count(m, big_m), seen.len() as f64);
            }
        }
    }

    #[test]
    fn enumeration_is_colex() {
        let all: Vec<Vec<u64>> = enumerate_compositions(3, 3)
            .map(|c| c.counts().to_vec())
            .collect();
        for w in all.windows(2) {
            let a: Vec<u64> = w[0].iter().rev().copied().collect();
            let b: Vec<u64> = w[1].iter().rev().copied().collect();
            assert!(a < b, "{:?} !< {:?}", w[0], w[1]);
        }
    }

    #[test]
    fn pmf_examples() {
        let r = SimplexVector::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(
            log_multinomial_pmf(&Composition::new(vec![4, 0]), &r).unwrap(),
            0.0
        );
        assert_eq!(
            log_multinomial_pmf(&Composition::new(vec![3, 1]), &r).unwrap(),
            f64::NEG_INFINITY
        );
        let half = SimplexVector::uniform(2).unwrap();
        let lp = log_multinomial_pmf(&Composition::new(vec![1, 1]), &half).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-14);
        assert!(log_multinomial_pmf(&Composition::new(vec![1, 1, 0]), &half).is_err());
    }

    #[test]
    fn pmf_normalises() {
        let rs = [
            vec![0.3, 0.7],
            vec![0.2, 0.5, 0.3],
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.0, 0.25, 0.75],
            vec![0.05, 0.05, 0.0, 0.9],
        ];
        for r in rs {
            let r = SimplexVector::new(r).unwrap();
            for m in 0..=10 {
                let total: f64 = enumerate_compositions(m, r.dim())
                    .map(|k| log_multinomial_pmf(&k, &r).unwrap().exp())
                    .sum();
                assert!((total - 1.0).abs() < 1e-10, "m = {m}: {total}");
            }
        }
    }

    #[test]
    fn exact_constant_hand_values() {
        assert!((log_i_kl_exact(1, 2).unwrap() - 2f64.ln()).abs() < 1e-14);
        assert!((log_i_kl_exact(2, 2).unwrap() - 2.5f64.ln()).abs() < 1e-14);
        assert!((log_i_kl_exact(1, 3).unwrap() - 3f64.ln()).abs() < 1e-14);
        assert!(log_i_kl_exact(0, 2).is_err());
        assert!(log_i_kl_exact(5, 1).is_err());
        assert!(matches!(
            log_i_kl_exact(2000, 6),
            Err(Error::InfeasibleEnumeration { .. })
        ));
    }

    #[test]
    fn stirling_closed_form() {
        // direct evaluation at (2, 2): sqrt(pi) e^{1/24} [1/Gamma(1) + 2/(sqrt(2 pi) Gamma(1/2))]
        let direct =
            PI.sqrt() * (1.0f64 / 24.0).exp() * (1.0 + 2.0 / ((2.0 * PI).sqrt() * PI.sqrt()));
        let got = log_i_kl_stirling(2, 2).unwrap();
        assert!(
            (got - direct.ln()).abs() < 1e-13,
            "{got} vs {}",
            direct.ln()
        );
        assert!(got > 2.5f64.ln());
        assert!(log_i_kl_stirling(100, 2).unwrap() >= log_i_kl_exact(100, 2).unwrap());
        assert!(matches!(
            log_i_kl_stirling(2, 3),
            Err(Error::StirlingDomain { .. })
        ));
    }

    #[test]
    fn exact_monotone_in_types() {
        for m in 1..=12 {
            let mut prev = f64::NEG_INFINITY;
            for big_m in 2..=5 {
                let v = log_i_kl_exact(m, big_m).unwrap();
                assert!(v >= prev, "m = {m}, M = {big_m}");
                prev = v;
            }
        }
    }

    #[test]
    fn exact_is_deterministic() {
        let a = log_i_kl_exact(40, 4).unwrap();
        let b = log_i_kl_exact(40, 4).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn reciprocal_sqrt_examples() {
        let c = reciprocal_sqrt_sum_check(1, 1).unwrap();
        assert!((c.exact_sum - 1.0).abs() < 1e-15);
        assert!((c.bound - 1.0).abs() < 1e-14);
        assert!(c.holds());

        let c = reciprocal_sqrt_sum_check(4, 2).unwrap();
        let hand = 2.0 / 3f64.sqrt() + 0.5;
        assert!((c.exact_sum - hand).abs() < 1e-15);
        assert!((c.bound - PI).abs() < 1e-14);

        let c = reciprocal_sqrt_sum_check(10, 3).unwrap();
        assert!(c.holds());
        assert!(reciprocal_sqrt_sum_check(2, 3).is_err());
    }

    #[test]
    fn log_sum_exp_matches_naive() {
        let xs = [-3.0, 0.5, 2.0, -1.0, 2.0, f64::NEG_INFINITY];
        let mut acc = LogSumExp::new();
        xs.iter().for_each(|&x| acc.add(x));
        let naive: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((acc.value() - naive).abs() < 1e-14);
        assert_eq!(LogSumExp::new().value(), f64::NEG_INFINITY);
    }
}
