use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::num17;

/// Diagonal Gaussian `N(w, diag(exp(zeta)))` over model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    #[serde(with = "num17::vec")]
    pub mean: Vec<f64>,
    #[serde(with = "num17::vec")]
    pub log_var: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        check_dims(mean.len(), log_var.len())?;
        if mean.iter().chain(&log_var).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(
                "posterior parameters must be finite".into(),
            ));
        }
        Ok(Self { mean, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.log_var.iter().map(|z| z.exp()).collect()
    }

    /// Flat parameter vector `w ++ zeta`.
    pub fn to_params(&self) -> Vec<f64> {
        self.mean.iter().chain(&self.log_var).copied().collect()
    }

    pub fn from_params(params: &[f64]) -> Result<Self> {
        if params.len() % 2 != 0 {
            return Err(Error::InvalidArgument(
                "parameter vector has odd length".into(),
            ));
        }
        let n = params.len() / 2;
        Self::new(params[..n].to_vec(), params[n..].to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorProvenance {
    Fixed,
    TrainedOnPriorSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    #[serde(with = "num17::vec")]
    pub mean: Vec<f64>,
    #[serde(with = "num17::vec")]
    pub var: Vec<f64>,
    pub provenance: PriorProvenance,
}

impl PriorSpec {
    pub fn new(mean: Vec<f64>, var: Vec<f64>, provenance: PriorProvenance) -> Result<Self> {
        check_dims(mean.len(), var.len())?;
        if mean.iter().any(|x| !x.is_finite()) || var.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidArgument(
                "prior needs finite means and positive variances".into(),
            ));
        }
        Ok(Self {
            mean,
            var,
            provenance,
        })
    }

    /// `N(0, var * I)`.
    pub fn isotropic(dim: usize, var: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![var; dim], PriorProvenance::Fixed)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `KL(Q || P)` between diagonal Gaussians.
pub fn gaussian_kl(q: &GaussianPosterior, p: &PriorSpec) -> Result<f64> {
    check_dims(p.dim(), q.dim())?;
    let mut total = 0.0;
    for n in 0..q.dim() {
        let r = p.var[n];
        let ratio = q.log_var[n].exp() / r;
        let diff = q.mean[n] - p.mean[n];
        // ratio - 1 - ln(ratio) written to stay exact at ratio == 1
        let log_ratio = q.log_var[n] - r.ln();
        total += (ratio - 1.0 - log_ratio) + diff * diff / r;
    }
    Ok(0.5 * total.max(0.0))
}

/// `(dKL/dw, dKL/dzeta)`.
pub fn gaussian_kl_gradient(q: &GaussianPosterior, p: &PriorSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(p.dim(), q.dim())?;
    let dw = (0..q.dim())
        .map(|n| (q.mean[n] - p.mean[n]) / p.var[n])
        .collect();
    let dz = (0..q.dim())
        .map(|n| 0.5 * (q.log_var[n].exp() / p.var[n] - 1.0))
        .collect();
    Ok((dw, dz))
}

/// `theta = w + eps * sqrt(exp(zeta))`.
pub fn pathwise_sample(q: &GaussianPosterior, eps: &[f64]) -> Result<Vec<f64>> {
    check_dims(q.dim(), eps.len())?;
    Ok((0..q.dim())
        .map(|n| q.mean[n] + eps[n] * (0.5 * q.log_var[n]).exp())
        .collect())
}

pub fn standard_normal_draws<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Neumaier-compensated sum of the per-coordinate terms, written from the
    /// textbook form `s/r + (w-v)^2/r + ln(r/s) - 1`.
    fn compensated_kl(q: &GaussianPosterior, p: &PriorSpec) -> f64 {
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        let mut add = |x: f64| {
            let t = sum + x;
            if sum.abs() >= x.abs() {
                comp += (sum - t) + x;
            } else {
                comp += (x - t) + sum;
            }
            sum = t;
        };
        for n in 0..q.dim() {
            let s = q.log_var[n].exp();
            let r = p.var[n];
            let d = q.mean[n] - p.mean[n];
            add(s / r);
            add(d * d / r);
            add((r / s).ln());
            add(-1.0);
        }
        0.5 * (sum + comp)
    }

    #[test]
    fn kl_examples() {
        let p = PriorSpec::new(vec![0.3, -1.0], vec![2.0, 0.5], PriorProvenance::Fixed).unwrap();
        let q = GaussianPosterior::new(vec![0.3, -1.0], vec![2.0f64.ln(), 0.5f64.ln()]).unwrap();
        assert!(gaussian_kl(&q, &p).unwrap() < 1e-15);

        let p1 = PriorSpec::isotropic(1, 1.0).unwrap();
        let q1 = GaussianPosterior::new(vec![1.0], vec![0.0]).unwrap();
        assert_eq!(gaussian_kl(&q1, &p1).unwrap(), 0.5);

        assert!(gaussian_kl(&q1, &p).is_err());
    }

    #[test]
    fn kl_matches_compensated_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let q = GaussianPosterior::new(
                (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
                (0..n).map(|_| rng.random_range(-4.0..2.0)).collect(),
            )
            .unwrap();
            let p = PriorSpec::new(
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..n).map(|_| rng.random_range(0.1..3.0)).collect(),
                PriorProvenance::Fixed,
            )
            .unwrap();
            let a = gaussian_kl(&q, &p).unwrap();
            let b = compensated_kl(&q, &p);
            assert!((a - b).abs() <= 1e-12 * b.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let p = PriorSpec::new(
            vec![0.1, 0.5, -0.2],
            vec![1.0, 0.3, 2.0],
            PriorProvenance::Fixed,
        )
        .unwrap();
        let q = GaussianPosterior::new(vec![0.7, -0.4, 0.0], vec![-1.0, 0.2, 0.9]).unwrap();
        let (dw, dz) = gaussian_kl_gradient(&q, &p).unwrap();
        let analytic: Vec<f64> = dw.into_iter().chain(dz).collect();
        let base = q.to_params();
        for (i, g) in analytic.iter().enumerate() {
            let h = 1e-6;
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fd = (gaussian_kl(&GaussianPosterior::from_params(&plus).unwrap(), &p).unwrap()
                - gaussian_kl(&GaussianPosterior::from_params(&minus).unwrap(), &p).unwrap())
                / (2.0 * h);
            assert!(
                (fd - g).abs() <= 1e-6 * g.abs().max(1e-3),
                "param {i}: {fd} vs {g}"
            );
        }
    }

    #[test]
    fn pathwise_examples() {
        let q = GaussianPosterior::new(vec![1.0, -2.0], vec![0.5, -800.0]).unwrap();
        assert_eq!(pathwise_sample(&q, &[0.0, 0.0]).unwrap(), q.mean);
        let theta = pathwise_sample(&q, &[0.3, 5.0]).unwrap();
        assert_eq!(theta[1], -2.0);
        assert!(pathwise_sample(&q, &[0.0]).is_err());
    }

    #[test]
    fn pathwise_mean_converges() {
        let q = GaussianPosterior::new(vec![0.5, -1.5, 3.0], vec![0.0, 1.0, -2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut sums = vec![0.0; 3];
        for _ in 0..n {
            let eps = standard_normal_draws(&mut rng, 3);
            for (s, t) in sums.iter_mut().zip(pathwise_sample(&q, &eps).unwrap()) {
                *s += t;
            }
        }
        for (k, s) in sums.iter().enumerate() {
            let sd = (0.5 * q.log_var[k]).exp();
            assert!((s / n as f64 - q.mean[k]).abs() < 4.0 * sd / (n as f64).sqrt());
        }
    }

    #[test]
    fn param_round_trip() {
        let q = GaussianPosterior::new(vec![1.0, 2.0], vec![3.0, 4.0]).unwrap();
        assert_eq!(GaussianPosterior::from_params(&q.to_params()).unwrap(), q);
        assert!(GaussianPosterior::new(vec![f64::NAN], vec![0.0]).is_err());
    }
}
