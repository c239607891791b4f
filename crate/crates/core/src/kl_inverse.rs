//! Loss-weighted kl-inverse.
//!
//! For an interior risk vector `u`, budget `c > 0` and losses `l`, the
//! maximiser of `l . v` over `{v : kl(u || v) <= c}` is the tilted vector
//! `v_j = lambda u_j / (mu + l_j)`, where `mu < -max l` is the unique root of
//! the strictly increasing function
//!
//! ```text
//! phi(mu) = ln(-sum_j u_j / (mu + l_j)) + sum_j u_j ln(-(mu + l_j))
//! ```
//!
//! and `lambda = (sum_j u_j / (mu + l_j))^-1 < 0`. The attained maximum
//! `f*` has envelope gradients `df*/du_j = lambda (1 + ln(u_j / v_j))` and
//! `df*/dc = -lambda`.
//!
//! Internally the root is found in the offset `a = -(mu + max l) > 0`, with
//! `t_j = a + (max l - l_j)`, which keeps every quantity positive and avoids
//! cancellation when `mu` is very negative (tiny budgets).

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::num17;
use crate::simplex::{kl_div, scalar_kl, LossVector, SimplexVector};

pub const DEFAULT_TOL: f64 = 1e-12;
pub const MAX_ITERATIONS: u32 = 200;
const MAX_SHRINK: u32 = 1100;

/// The maximiser of the loss-weighted kl-inverse problem together with its
/// multipliers and envelope gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltedSolution {
    #[serde(with = "num17")]
    pub mu_star: f64,
    #[serde(with = "num17")]
    pub lambda_star: f64,
    #[serde(with = "num17::vec")]
    pub v_star: Vec<f64>,
    #[serde(with = "num17")]
    pub f_star: f64,
    #[serde(with = "num17::vec")]
    pub grad_u: Vec<f64>,
    #[serde(with = "num17")]
    pub grad_c: f64,
    /// Achieved `|phi(mu*) - c|`.
    #[serde(with = "num17")]
    pub residual: f64,
    /// Set for the `c = 0` solution, whose gradients are the `c -> 0+` limits.
    pub one_sided: bool,
}

impl TiltedSolution {
    pub fn v_star(&self) -> Result<SimplexVector> {
        SimplexVector::new(self.v_star.clone())
    }
}

/// Precomputed loss gaps `d_j = max l - l_j` and their `u`-average.
struct Tilt<'a> {
    u: &'a [f64],
    gaps: Vec<f64>,
    mean_gap: f64,
    max_loss: f64,
}

impl<'a> Tilt<'a> {
    fn new(u: &'a SimplexVector, losses: &LossVector) -> Result<Self> {
        check_dims(losses.dim(), u.dim())?;
        if let Some(index) = u.first_zero() {
            return Err(Error::BoundaryRisk { index });
        }
        let max_loss = losses.max();
        let gaps: Vec<f64> = losses.as_slice().iter().map(|l| max_loss - l).collect();
        let mean_gap = gaps.iter().zip(u.as_slice()).map(|(d, w)| d * w).sum();
        Ok(Self {
            u: u.as_slice(),
            gaps,
            mean_gap,
            max_loss,
        })
    }

    /// `phi` as a function of the offset `a > 0`.
    ///
    /// With `s = sum_j u_j t_j` and `e_j = t_j / s - 1` (so `sum_j u_j e_j = 0`),
    /// `phi = ln(1 + sum_j u_j e_j^2 / (1 + e_j)) + sum_j u_j (ln(1 + e_j) - e_j)`.
    fn phi(&self, a: f64) -> f64 {
        let s = a + self.mean_gap;
        let mut quad = 0.0;
        let mut log_part = 0.0;
        for (&uj, &dj) in self.u.iter().zip(&self.gaps) {
            let t = a + dj;
            let ratio = t / s;
            let e = (dj - self.mean_gap) / s;
            quad += uj * e * e / ratio;
            let log_ratio = if e.abs() < 0.5 { e.ln_1p() } else { ratio.ln() };
            log_part += uj * (log_ratio - e);
        }
        quad.ln_1p() + log_part
    }

    /// Bracket then bisect for `phi(a) = c`. Returns `(a, residual)`.
    fn solve(&self, c: f64, tol: f64) -> Result<(f64, f64)> {
        let scale = 1.0 + self.max_loss;
        // large a <=> small phi
        let mut big = scale;
        let mut doublings = 0;
        while self.phi(big) >= c {
            big *= 2.0;
            doublings += 1;
            if doublings > MAX_ITERATIONS || !big.is_finite() {
                return Err(Error::NoBracket {
                    c,
                    iterations: MAX_ITERATIONS,
                });
            }
        }
        let mut small = scale;
        let mut halvings = 0;
        while self.phi(small) <= c {
            small *= 0.5;
            halvings += 1;
            if halvings > MAX_SHRINK || small == 0.0 {
                return Err(Error::NoBracket {
                    c,
                    iterations: MAX_SHRINK,
                });
            }
        }

        let mut best = (big, (self.phi(big) - c).abs());
        for (a, r) in [(small, (self.phi(small) - c).abs())] {
            if r < best.1 {
                best = (a, r);
            }
        }
        for _ in 0..MAX_ITERATIONS {
            if best.1 <= tol {
                break;
            }
            let mid = if big > 2.0 * small {
                (small * big).sqrt()
            } else {
                0.5 * (small + big)
            };
            if mid <= small || mid >= big {
                break;
            }
            let value = self.phi(mid);
            let residual = (value - c).abs();
            if residual < best.1 {
                best = (mid, residual);
            }
            if value > c {
                small = mid;
            } else {
                big = mid;
            }
        }
        if best.1 > tol {
            return Err(Error::NotConverged {
                residual: best.1,
                tol,
            });
        }
        Ok(best)
    }

    fn solution(&self, losses: &LossVector, a: f64, residual: f64) -> TiltedSolution {
        let weights: Vec<f64> = self
            .u
            .iter()
            .zip(&self.gaps)
            .map(|(uj, dj)| uj / (a + dj))
            .collect();
        let total: f64 = weights.iter().sum();
        let v_star: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let lambda_star = -1.0 / total;
        let f_star = losses
            .as_slice()
            .iter()
            .zip(&v_star)
            .map(|(l, v)| l * v)
            .sum();
        let grad_u = envelope_grad_u(lambda_star, self.u, &v_star);
        TiltedSolution {
            mu_star: -self.max_loss - a,
            lambda_star,
            v_star,
            f_star,
            grad_u,
            grad_c: -lambda_star,
            residual,
            one_sided: false,
        }
    }
}

fn envelope_grad_u(lambda: f64, u: &[f64], v: &[f64]) -> Vec<f64> {
    u.iter()
        .zip(v)
        .map(|(uj, vj)| lambda * (1.0 + (uj / vj).ln()))
        .collect()
}

fn check_budget(c: f64, tol: f64) -> Result<()> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "budget c must be positive and finite, got {c}"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    Ok(())
}

/// `phi(mu)` for `mu < -max l` and interior `u`.
pub fn phi(mu: f64, u: &SimplexVector, losses: &LossVector) -> Result<f64> {
    let tilt = Tilt::new(u, losses)?;
    let a = -(mu + tilt.max_loss);
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::OutsideDomain {
            mu,
            upper: -tilt.max_loss,
        });
    }
    Ok(tilt.phi(a))
}

/// The Lagrange multiplier `mu*` solving `phi(mu) = c`.
pub fn solve_mu_star(u: &SimplexVector, c: f64, losses: &LossVector, tol: f64) -> Result<f64> {
    check_budget(c, tol)?;
    let tilt = Tilt::new(u, losses)?;
    let (a, _) = tilt.solve(c, tol)?;
    Ok(-tilt.max_loss - a)
}

/// Solves the kl-inverse problem. `c = 0` is answered analytically with
/// `v* = u`.
pub fn kl_inverse_total(
    u: &SimplexVector,
    c: f64,
    losses: &LossVector,
    tol: f64,
) -> Result<TiltedSolution> {
    if c == 0.0 {
        return degenerate_solution(u, losses);
    }
    check_budget(c, tol)?;
    let tilt = Tilt::new(u, losses)?;
    let (a, residual) = tilt.solve(c, tol)?;
    Ok(tilt.solution(losses, a, residual))
}

/// `c = 0`: `v* = u`. `lambda -> -inf` as `c -> 0+`, so `grad_c` is `+inf`;
/// `grad_u` reports the tangent-space limit `l_j - l . u` (the component of
/// the gradient along `(1, ..., 1)` diverges and is dropped).
fn degenerate_solution(u: &SimplexVector, losses: &LossVector) -> Result<TiltedSolution> {
    let tilt = Tilt::new(u, losses)?;
    let f_star: f64 = losses
        .as_slice()
        .iter()
        .zip(tilt.u)
        .map(|(l, v)| l * v)
        .sum();
    Ok(TiltedSolution {
        mu_star: f64::NEG_INFINITY,
        lambda_star: f64::NEG_INFINITY,
        v_star: tilt.u.to_vec(),
        f_star,
        grad_u: losses.as_slice().iter().map(|l| l - f_star).collect(),
        grad_c: f64::INFINITY,
        residual: 0.0,
        one_sided: true,
    })
}

/// Envelope gradients `(df*/du, df*/dc)` recomputed from a stored solution.
pub fn grad_f_star(sol: &TiltedSolution, u: &SimplexVector) -> Result<(Vec<f64>, f64)> {
    check_dims(sol.v_star.len(), u.dim())?;
    if sol.one_sided {
        return Ok((sol.grad_u.clone(), sol.grad_c));
    }
    if !(sol.lambda_star < 0.0) || sol.v_star.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument(
            "solution is not a valid interior maximiser".into(),
        ));
    }
    Ok((
        envelope_grad_u(sol.lambda_star, u.as_slice(), &sol.v_star),
        -sol.lambda_star,
    ))
}

fn check_scalar_args(q: f64, budget: f64, tol: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidProbability { index: 0, value: q });
    }
    if budget.is_nan() || budget < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "budget must be >= 0, got {budget}"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    Ok(())
}

/// `sup{p in [q, 1] : kl(q || p) <= B}` by bisection; the returned point is
/// the outer end of the final bracket, so it never undershoots.
pub fn scalar_kl_inverse_upper(q: f64, budget: f64, tol: f64) -> Result<f64> {
    check_scalar_args(q, budget, tol)?;
    if budget == 0.0 || q == 1.0 {
        return Ok(q);
    }
    if scalar_kl(q, 1.0)? <= budget {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (q, 1.0);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if scalar_kl(q, mid)? <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// `inf{p in [0, q] : kl(q || p) <= B}`; returns the outer (lower) end.
pub fn scalar_kl_inverse_lower(q: f64, budget: f64, tol: f64) -> Result<f64> {
    check_scalar_args(q, budget, tol)?;
    if budget == 0.0 || q == 0.0 {
        return Ok(q);
    }
    if scalar_kl(q, 0.0)? <= budget {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, q);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if scalar_kl(q, mid)? <= budget {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(lo)
}

/// Grid search over interior lattice points of the simplex with spacing
/// `grid_step`; an independent check on [`kl_inverse_total`].
pub fn brute_force_kl_inverse(
    u: &SimplexVector,
    c: f64,
    losses: &LossVector,
    grid_step: f64,
) -> Result<f64> {
    check_dims(losses.dim(), u.dim())?;
    let dim = u.dim();
    if dim > 4 {
        return Err(Error::InvalidArgument(format!(
            "grid search supports M <= 4, got {dim}"
        )));
    }
    if !(grid_step > 0.0 && grid_step < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "grid step must be in (0, 1), got {grid_step}"
        )));
    }
    let n = (1.0 / grid_step).round() as u64;
    if n < dim as u64 {
        return Err(Error::InvalidArgument(
            "grid too coarse for an interior point".into(),
        ));
    }
    let nf = n as f64;
    let l = losses.as_slice();
    let q = u.as_slice();
    let mut best = f64::NEG_INFINITY;
    let mut v = vec![0.0; dim];
    crate::constants::enumerate_compositions(n - dim as u64, dim).for_each_counts(|counts| {
        for (vj, &k) in v.iter_mut().zip(counts) {
            *vj = (k + 1) as f64 / nf;
        }
        let mut kl = 0.0;
        for (&qj, &vj) in q.iter().zip(&v) {
            if qj > 0.0 {
                kl += qj * (qj / vj).ln();
            }
        }
        if kl <= c {
            let value: f64 = l.iter().zip(&v).map(|(a, b)| a * b).sum();
            best = best.max(value);
        }
    });
    if best == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument(
            "no feasible grid point; refine the grid".into(),
        ));
    }
    Ok(best)
}

/// Checks that a stored solution satisfies its defining constraint.
pub fn constraint_gap(sol: &TiltedSolution, u: &SimplexVector, c: f64) -> Result<f64> {
    Ok((kl_div(u, &sol.v_star()?)? - c).abs())
}
