//! Bound certificates.
//!
//! A certificate starts from the kl budget
//! `B = (KL(Q||P) + ln(I_kl(m, m) / delta)) / m` and reports every bound that
//! follows from `kl(R_S || R_D) <= B`: tightest per-type intervals, the
//! loss-weighted total-risk bound, and total-variation / Hellinger bounds.
//! Certificates are plain data and a pure function of their inputs, so any
//! serialised certificate can be recomputed and compared byte-for-byte.

use serde::{Deserialize, Serialize};

use crate::constants::{composition_count, log_i_kl, ConstantMode};
use crate::error::{check_dims, Error, Result};
use crate::kl_inverse::{
    kl_inverse_total, scalar_kl_inverse_lower, scalar_kl_inverse_upper, TiltedSolution, DEFAULT_TOL,
};
use crate::simplex::{hellinger_bound_from_tv, tv_bound_from_kl_budget, LossVector, SimplexVector};

/// Bracket width used for the per-type scalar inversions.
pub const INTERVAL_TOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct PacBayesInputs {
    pub m: u64,
    pub delta: f64,
    pub kl_qp: f64,
    pub empirical_risk: SimplexVector,
}

impl PacBayesInputs {
    pub fn new(m: u64, delta: f64, kl_qp: f64, empirical_risk: SimplexVector) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument(
                "sample size m must be at least 1".into(),
            ));
        }
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "delta must lie in (0, 1], got {delta}"
            )));
        }
        if !(kl_qp >= 0.0) || !kl_qp.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "KL(Q||P) must be finite and >= 0, got {kl_qp}"
            )));
        }
        Ok(Self {
            m,
            delta,
            kl_qp,
            empirical_risk,
        })
    }

    pub fn num_types(&self) -> usize {
        self.empirical_risk.dim()
    }
}

/// `(KL(Q||P) + ln I_kl - ln delta) / m` in nats.
pub fn bound_budget(inputs: &PacBayesInputs, mode: ConstantMode) -> Result<f64> {
    let log_i = log_i_kl(inputs.m, inputs.num_types(), mode)?;
    Ok(budget_from_log_constant(inputs, log_i))
}

fn budget_from_log_constant(inputs: &PacBayesInputs, log_i: f64) -> f64 {
    ((inputs.kl_qp + log_i - inputs.delta.ln()) / inputs.m as f64).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    #[serde(with = "crate::num17")]
    pub lower: f64,
    #[serde(with = "crate::num17")]
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// `[L_j, U_j]` = the set of `p` with `kl(q_j || p) <= B`, per coordinate.
pub fn per_type_intervals(empirical_risk: &SimplexVector, budget: f64) -> Result<Vec<Interval>> {
    empirical_risk
        .as_slice()
        .iter()
        .map(|&q| {
            Ok(Interval {
                lower: scalar_kl_inverse_lower(q, budget, INTERVAL_TOL)?,
                upper: scalar_kl_inverse_upper(q, budget, INTERVAL_TOL)?,
            })
        })
        .collect()
}

/// `sup{l . r : kl(R_S || r) <= B}` with the maximiser and multipliers.
pub fn total_risk_bound(
    empirical_risk: &SimplexVector,
    budget: f64,
    losses: &LossVector,
) -> Result<TiltedSolution> {
    check_dims(empirical_risk.dim(), losses.dim())?;
    if budget.is_nan() || budget < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "budget must be >= 0, got {budget}"
        )));
    }
    kl_inverse_total(empirical_risk, budget, losses, DEFAULT_TOL)
}

/// Pseudo-count smoothing `q <- (m q + alpha) / (m + M alpha)`.
pub fn smooth_risk(empirical_risk: &SimplexVector, m: u64, alpha: f64) -> Result<SimplexVector> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "smoothing alpha must be positive, got {alpha}"
        )));
    }
    let mf = m as f64;
    let denom = mf + empirical_risk.dim() as f64 * alpha;
    SimplexVector::new(
        empirical_risk
            .as_slice()
            .iter()
            .map(|q| (mf * q + alpha) / denom)
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantRecord {
    #[serde(with = "crate::num17")]
    pub log_value: f64,
    /// Number of compositions enumerated (exact mode only).
    pub compositions: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverResiduals {
    /// `|phi(mu*) - B|` of the total-risk solve.
    #[serde(with = "crate::num17::option")]
    pub kl_inverse: Option<f64>,
    /// Final bracket width of the per-type bisections.
    #[serde(with = "crate::num17")]
    pub interval_bracket: f64,
}

/// Records a heuristic modification of the empirical risk. When `applied`,
/// the total-risk bound certifies `smoothed_risk`, not the raw vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingRecord {
    #[serde(with = "crate::num17")]
    pub alpha: f64,
    pub applied: bool,
    #[serde(with = "crate::num17::option_vec")]
    pub smoothed_risk: Option<Vec<f64>>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCertificate {
    pub m: u64,
    #[serde(rename = "M")]
    pub num_types: usize,
    #[serde(with = "crate::num17")]
    pub delta: f64,
    #[serde(with = "crate::num17")]
    pub kl_qp: f64,
    #[serde(with = "crate::num17::vec")]
    pub empirical_risk: Vec<f64>,
    pub mode: ConstantMode,
    pub constant: ConstantRecord,
    #[serde(with = "crate::num17")]
    pub budget_nats: f64,
    pub per_type_intervals: Vec<Interval>,
    #[serde(with = "crate::num17::option_vec")]
    pub loss_vector: Option<Vec<f64>>,
    #[serde(with = "crate::num17::option")]
    pub total_risk_bound: Option<f64>,
    #[serde(with = "crate::num17::option_vec")]
    pub total_risk_maximiser: Option<Vec<f64>>,
    #[serde(with = "crate::num17")]
    pub tv_bound: f64,
    #[serde(with = "crate::num17")]
    pub hellinger_bound: f64,
    pub solver_residuals: SolverResiduals,
    pub smoothing: Option<SmoothingRecord>,
}

/// Composes budget, intervals, total-risk bound and distance bounds.
///
/// `smoothing_alpha` only takes effect when a loss vector is given and the
/// empirical risk has a zero coordinate; without it such inputs are refused
/// with [`Error::BoundaryRisk`].
pub fn build_certificate(
    inputs: &PacBayesInputs,
    mode: ConstantMode,
    losses: Option<&LossVector>,
    smoothing_alpha: Option<f64>,
) -> Result<BoundCertificate> {
    let num_types = inputs.num_types();
    let log_value = log_i_kl(inputs.m, num_types, mode)?;
    let budget = budget_from_log_constant(inputs, log_value);
    let intervals = per_type_intervals(&inputs.empirical_risk, budget)?;
    let tv_bound = tv_bound_from_kl_budget(budget)?;
    let hellinger_bound = hellinger_bound_from_tv(tv_bound)?;

    let mut smoothing = smoothing_alpha.map(|alpha| SmoothingRecord {
        alpha,
        applied: false,
        smoothed_risk: None,
        note: "pseudo-count smoothing is a heuristic; when applied the total-risk bound \
               refers to the smoothed risk vector"
            .into(),
    });

    let mut solution = None;
    if let Some(losses) = losses {
        check_dims(num_types, losses.dim())?;
        let risk = match (inputs.empirical_risk.first_zero(), smoothing.as_mut()) {
            (None, _) => inputs.empirical_risk.clone(),
            (Some(_), Some(record)) => {
                let smoothed = smooth_risk(&inputs.empirical_risk, inputs.m, record.alpha)?;
                record.applied = true;
                record.smoothed_risk = Some(smoothed.as_slice().to_vec());
                smoothed
            }
            (Some(index), None) => return Err(Error::BoundaryRisk { index }),
        };
        solution = Some(total_risk_bound(&risk, budget, losses)?);
    }

    Ok(BoundCertificate {
        m: inputs.m,
        num_types,
        delta: inputs.delta,
        kl_qp: inputs.kl_qp,
        empirical_risk: inputs.empirical_risk.as_slice().to_vec(),
        mode,
        constant: ConstantRecord {
            log_value,
            compositions: match mode {
                ConstantMode::Exact => Some(composition_count(inputs.m, num_types) as u64),
                ConstantMode::Stirling => None,
            },
        },
        budget_nats: budget,
        per_type_intervals: intervals,
        loss_vector: losses.map(|l| l.as_slice().to_vec()),
        total_risk_bound: solution.as_ref().map(|s| s.f_star),
        total_risk_maximiser: solution.as_ref().map(|s| s.v_star.clone()),
        tv_bound,
        hellinger_bound,
        solver_residuals: SolverResiduals {
            kl_inverse: solution.as_ref().map(|s| s.residual),
            interval_bracket: INTERVAL_TOL,
        },
        smoothing,
    })
}

impl BoundCertificate {
    /// Canonical serialisation (pretty-printed JSON, no trailing newline).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn inputs(&self) -> Result<PacBayesInputs> {
        PacBayesInputs::new(
            self.m,
            self.delta,
            self.kl_qp,
            SimplexVector::new(self.empirical_risk.clone())?,
        )
    }

    /// Rebuilds the certificate from its recorded inputs.
    pub fn recompute(&self) -> Result<BoundCertificate> {
        let losses = self.loss_vector.clone().map(LossVector::new).transpose()?;
        build_certificate(
            &self.inputs()?,
            self.mode,
            losses.as_ref(),
            self.smoothing.as_ref().map(|s| s.alpha),
        )
    }
}

/// True when `text` is exactly the canonical serialisation of the
/// certificate recomputed from the inputs it records.
pub fn revalidate_certificate(text: &str) -> Result<bool> {
    let parsed = BoundCertificate::from_json(text)?;
    let rebuilt = parsed.recompute()?.to_json()?;
    Ok(rebuilt == text.trim_end())
}
