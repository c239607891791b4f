//! Empirical checks of the inequalities behind the certificates: bound
//! validity on synthetic worlds, multinomial domination, the reciprocal
//! square-root sum inequality and the marginal kl equality case.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::constants::{log_i_kl, reciprocal_sqrt_sum_check, ConstantMode};
use crate::error::{check_dims, Error, Result};
use crate::num17;
use crate::simplex::{kl_div, kl_slices, scalar_kl, LossVector, SimplexVector};
use crate::training::ErrorPartition;

fn categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// A finite data-generating world: labels from `class_priors`, then one of
/// `K` feature symbols from `feature_probs[label]`. Hypotheses are soft
/// prediction tables `hypotheses[h][x][pred]`; prior and posterior are
/// weights over them.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub class_priors: SimplexVector,
    pub feature_probs: Vec<SimplexVector>,
    pub hypotheses: Vec<Vec<SimplexVector>>,
    pub prior: SimplexVector,
    pub posterior: SimplexVector,
    pub partition: ErrorPartition,
    pub seed: u64,
    /// `contrib[(x * C + y) * M + j]`: posterior mass on type `j` at `(x, y)`.
    contrib: Vec<f64>,
}

impl SyntheticWorld {
    pub fn new(
        class_priors: SimplexVector,
        feature_probs: Vec<SimplexVector>,
        hypotheses: Vec<Vec<SimplexVector>>,
        prior: SimplexVector,
        posterior: SimplexVector,
        partition: ErrorPartition,
        seed: u64,
    ) -> Result<Self> {
        let c = partition.num_classes();
        check_dims(c, class_priors.dim())?;
        check_dims(c, feature_probs.len())?;
        let k = feature_probs[0].dim();
        for f in &feature_probs {
            check_dims(k, f.dim())?;
        }
        check_dims(hypotheses.len(), prior.dim())?;
        check_dims(hypotheses.len(), posterior.dim())?;
        for h in &hypotheses {
            check_dims(k, h.len())?;
            for row in h {
                check_dims(c, row.dim())?;
            }
        }
        let m_types = partition.num_types();
        let mut contrib = vec![0.0; k * c * m_types];
        for x in 0..k {
            for y in 0..c {
                let cell = &mut contrib[(x * c + y) * m_types..(x * c + y + 1) * m_types];
                for (h, &w) in hypotheses.iter().zip(posterior.as_slice()) {
                    for (pred, &p) in h[x].as_slice().iter().enumerate() {
                        cell[partition.type_of(pred, y)] += w * p;
                    }
                }
            }
        }
        Ok(Self {
            class_priors,
            feature_probs,
            hypotheses,
            prior,
            posterior,
            partition,
            seed,
            contrib,
        })
    }

    /// Single feature symbol; each hypothesis predicts a fixed distribution.
    pub fn constant_hypotheses(
        class_priors: SimplexVector,
        predictions: Vec<SimplexVector>,
        prior: SimplexVector,
        posterior: SimplexVector,
        partition: ErrorPartition,
        seed: u64,
    ) -> Result<Self> {
        let c = class_priors.dim();
        let features = vec![SimplexVector::new(vec![1.0, 0.0])?; c];
        let hypotheses = predictions
            .into_iter()
            .map(|p| vec![p.clone(), p])
            .collect();
        Self::new(
            class_priors,
            features,
            hypotheses,
            prior,
            posterior,
            partition,
            seed,
        )
    }

    pub fn num_types(&self) -> usize {
        self.partition.num_types()
    }

    fn cell(&self, x: usize, y: usize) -> &[f64] {
        let m = self.num_types();
        let c = self.partition.num_classes();
        &self.contrib[(x * c + y) * m..(x * c + y + 1) * m]
    }

    pub fn kl_qp(&self) -> Result<f64> {
        kl_div(&self.posterior, &self.prior)
    }

    fn expectation(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.num_types()];
        for (y, &py) in self.class_priors.as_slice().iter().enumerate() {
            for (x, &px) in self.feature_probs[y].as_slice().iter().enumerate() {
                for (o, v) in out.iter_mut().zip(f(self.cell(x, y))) {
                    *o += py * px * v;
                }
            }
        }
        out
    }

    /// `R_D(Q)` in closed form.
    pub fn true_risk(&self) -> Result<SimplexVector> {
        SimplexVector::new(self.expectation(<[f64]>::to_vec))
    }

    /// Per-row standard deviation of each coordinate of `R_S(Q)`.
    pub fn row_std(&self) -> Result<Vec<f64>> {
        let second = self.expectation(|cell| cell.iter().map(|v| v * v).collect());
        let mean = self.true_risk()?;
        Ok(second
            .iter()
            .zip(mean.as_slice())
            .map(|(s, m)| (s - m * m).max(0.0).sqrt())
            .collect())
    }

    /// Draws `m` rows `(feature, label)`.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<(usize, usize)> {
        (0..m)
            .map(|_| {
                let y = categorical(self.class_priors.as_slice(), rng);
                (categorical(self.feature_probs[y].as_slice(), rng), y)
            })
            .collect()
    }

    /// `R_S(Q)` for a drawn sample.
    pub fn empirical_risk(&self, rows: &[(usize, usize)]) -> Result<SimplexVector> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("empty sample".into()));
        }
        let mut acc = vec![0.0; self.num_types()];
        for &(x, y) in rows {
            acc.iter_mut()
                .zip(self.cell(x, y))
                .for_each(|(a, v)| *a += v);
        }
        SimplexVector::new(
            acc.into_iter()
                .map(|a| (a / rows.len() as f64).clamp(0.0, 1.0))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViolationReport {
    pub m: u64,
    pub trials: usize,
    #[serde(with = "num17")]
    pub delta: f64,
    pub mode: ConstantMode,
    #[serde(with = "num17")]
    pub budget: f64,
    pub violations: usize,
    #[serde(with = "num17")]
    pub fraction: f64,
    /// `delta + 3 sqrt(delta (1 - delta) / trials)`
    #[serde(with = "num17")]
    pub threshold: f64,
    pub pass: bool,
}

/// Fraction of independent samples of size `m` for which
/// `kl(R_S(Q) || R_D(Q))` exceeds the budget.
pub fn mc_bound_violation(
    world: &SyntheticWorld,
    m: u64,
    delta: f64,
    trials: usize,
    mode: ConstantMode,
) -> Result<ViolationReport> {
    if m == 0 || trials == 0 {
        return Err(Error::InvalidArgument(
            "m and trials must be positive".into(),
        ));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta must lie in (0, 1], got {delta}"
        )));
    }
    let truth = world.true_risk()?;
    let budget = (world.kl_qp()? + log_i_kl(m, world.num_types(), mode)? - delta.ln()) / m as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed);
    let mut violations = 0;
    for _ in 0..trials {
        let rows = world.sample(m as usize, &mut rng);
        if kl_div(&world.empirical_risk(&rows)?, &truth)? > budget {
            violations += 1;
        }
    }
    let fraction = violations as f64 / trials as f64;
    let threshold = delta + 3.0 * (delta * (1.0 - delta) / trials as f64).sqrt();
    Ok(ViolationReport {
        m,
        trials,
        delta,
        mode,
        budget,
        violations,
        fraction,
        threshold,
        pass: fraction <= threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitCheck {
    pub m: usize,
    #[serde(with = "num17::vec")]
    pub empirical: Vec<f64>,
    #[serde(with = "num17::vec")]
    pub truth: Vec<f64>,
    /// Largest `|R_S - R_D|` in units of its standard error.
    #[serde(with = "num17")]
    pub max_z: f64,
}

/// Compares `R_S(Q)` on one large sample with the closed-form `R_D(Q)`.
pub fn empirical_risk_limit_check(world: &SyntheticWorld, m: usize) -> Result<LimitCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed);
    rng.set_stream(2);
    let empirical = world.empirical_risk(&world.sample(m, &mut rng))?;
    let truth = world.true_risk()?;
    let std = world.row_std()?;
    let mut max_z: f64 = 0.0;
    for j in 0..truth.dim() {
        let gap = (empirical.get(j) - truth.get(j)).abs();
        let se = std[j] / (m as f64).sqrt();
        let z = if se > 0.0 {
            gap / se
        } else if gap <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        };
        max_z = max_z.max(z);
    }
    Ok(LimitCheck {
        m,
        empirical: empirical.into_vec(),
        truth: truth.into_vec(),
        max_z,
    })
}

/// Law of the i.i.d. simplex-valued vectors compared against one-hot draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum InnerLaw {
    /// One-hot draws from `Cat(mu)`: the comparison law itself.
    Categorical,
    PointMass,
    /// Dirichlet with parameters `concentration * M * mu`.
    Dirichlet {
        concentration: f64,
    },
}

impl InnerLaw {
    fn name(&self) -> String {
        match self {
            InnerLaw::Categorical => "categorical".into(),
            InnerLaw::PointMass => "point-mass".into(),
            InnerLaw::Dirichlet { concentration } => format!("dirichlet({concentration})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominationReport {
    pub law: String,
    pub m: usize,
    pub samples: usize,
    #[serde(with = "num17")]
    pub lhs: f64,
    #[serde(with = "num17")]
    pub lhs_se: f64,
    #[serde(with = "num17")]
    pub rhs: f64,
    #[serde(with = "num17")]
    pub rhs_se: f64,
    /// Standard error of the paired difference `lhs - rhs`.
    #[serde(with = "num17")]
    pub diff_se: f64,
    pub pass: bool,
}

#[derive(Default)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n
    }

    fn se(&self) -> f64 {
        let mean = self.mean();
        let var = ((self.sum_sq - self.n * mean * mean) / (self.n - 1.0).max(1.0)).max(0.0);
        (var / self.n).sqrt()
    }
}

/// Paired Monte Carlo comparison of `E exp(m kl(mean(X) || mu))` for the
/// inner law against the same quantity for one-hot draws. Each one-hot
/// `X'_i` is drawn from `Cat(X_i)`, which has law `Cat(mu)` and shares
/// randomness with `X_i`.
pub fn mc_multinomial_domination(
    mu: &SimplexVector,
    m: usize,
    samples: usize,
    inner_law: InnerLaw,
    seed: u64,
) -> Result<DominationReport> {
    if m == 0 || samples < 2 {
        return Err(Error::InvalidArgument(
            "need m >= 1 and at least two samples".into(),
        ));
    }
    let dim = mu.dim();
    let mu_s = mu.as_slice();
    let gammas = match inner_law {
        InnerLaw::Dirichlet { concentration } => {
            if !(concentration > 0.0 && concentration.is_finite()) || !mu.is_interior() {
                return Err(Error::InvalidArgument(
                    "dirichlet law needs a positive concentration and an interior mean".into(),
                ));
            }
            let alpha: Vec<f64> = mu_s
                .iter()
                .map(|p| concentration * dim as f64 * p)
                .collect();
            let total: f64 = alpha.iter().sum();
            let gap = alpha
                .iter()
                .zip(mu_s)
                .map(|(a, p)| (a / total - p).abs())
                .fold(0.0, f64::max);
            if gap > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "inner law mean differs from mu by {gap}"
                )));
            }
            alpha
                .iter()
                .map(|&a| Gamma::new(a, 1.0).map_err(|e| Error::InvalidArgument(e.to_string())))
                .collect::<Result<Vec<_>>>()?
        }
        _ => Vec::new(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut lhs, mut rhs, mut diff) = (Moments::default(), Moments::default(), Moments::default());
    let mut x = vec![0.0; dim];
    let mut mean_x = vec![0.0; dim];
    let mut mean_onehot = vec![0.0; dim];
    for _ in 0..samples {
        mean_x.iter_mut().for_each(|v| *v = 0.0);
        mean_onehot.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..m {
            match inner_law {
                InnerLaw::Categorical => {
                    x.iter_mut().for_each(|v| *v = 0.0);
                    x[categorical(mu_s, &mut rng)] = 1.0;
                }
                InnerLaw::PointMass => x.copy_from_slice(mu_s),
                InnerLaw::Dirichlet { .. } => loop {
                    for (v, g) in x.iter_mut().zip(&gammas) {
                        *v = g.sample(&mut rng);
                    }
                    let total: f64 = x.iter().sum();
                    if total > 0.0 {
                        x.iter_mut().for_each(|v| *v /= total);
                        break;
                    }
                },
            }
            mean_onehot[categorical(&x, &mut rng)] += 1.0;
            mean_x.iter_mut().zip(&x).for_each(|(a, v)| *a += v);
        }
        let scale = 1.0 / m as f64;
        mean_x.iter_mut().for_each(|v| *v *= scale);
        mean_onehot.iter_mut().for_each(|v| *v *= scale);
        let a = (m as f64 * kl_slices(&mean_x, mu_s)).exp();
        let b = (m as f64 * kl_slices(&mean_onehot, mu_s)).exp();
        lhs.push(a);
        rhs.push(b);
        diff.push(a - b);
    }
    let pass = lhs.mean() <= rhs.mean() + 3.0 * diff.se();
    Ok(DominationReport {
        law: inner_law.name(),
        m,
        samples,
        lhs: lhs.mean(),
        lhs_se: lhs.se(),
        rhs: rhs.mean(),
        rhs_se: rhs.se(),
        diff_se: diff.se(),
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginalWitness {
    #[serde(with = "num17::vec")]
    pub p: Vec<f64>,
    #[serde(with = "num17")]
    pub kl_joint: f64,
    #[serde(with = "num17")]
    pub kl_marginal: f64,
}

/// Builds the `p` with coordinate `j` equal to `p_j` that attains
/// `kl(q || p) = kl(q_j || p_j)`: the remaining coordinates are `q`
/// rescaled to mass `1 - p_j`.
pub fn marginal_equality_witness(q: &SimplexVector, j: usize, p_j: f64) -> Result<MarginalWitness> {
    if j >= q.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            got: j + 1,
        });
    }
    if q.get(j) >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "q_{j} = 1 leaves nothing to rescale"
        )));
    }
    if !(0.0..1.0).contains(&p_j) {
        return Err(Error::InvalidProbability {
            index: j,
            value: p_j,
        });
    }
    let ratio = (1.0 - p_j) / (1.0 - q.get(j));
    let p: Vec<f64> = q
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &qi)| if i == j { p_j } else { ratio * qi })
        .collect();
    let kl_joint = kl_div(q, &SimplexVector::new(p.clone())?)?;
    Ok(MarginalWitness {
        p,
        kl_joint,
        kl_marginal: scalar_kl(q.get(j), p_j)?,
    })
}

/// Smallest `kl(q || p) - kl(q_j || p_j)` over random `p` sharing `p_j`.
pub fn marginal_perturbation_gap(
    q: &SimplexVector,
    j: usize,
    p_j: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let marginal = marginal_equality_witness(q, j, p_j)?.kl_marginal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_gap = f64::INFINITY;
    for _ in 0..trials {
        let w: Vec<f64> = (0..q.dim()).map(|_| rng.random_range(0.01..1.0)).collect();
        let rest: f64 = w
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != j)
            .map(|(_, v)| v)
            .sum();
        let p: Vec<f64> = w
            .iter()
            .enumerate()
            .map(|(i, &v)| if i == j { p_j } else { (1.0 - p_j) * v / rest })
            .collect();
        let joint = kl_div(q, &SimplexVector::new(p)?)?;
        min_gap = min_gap.min(joint - marginal);
    }
    Ok(min_gap)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReciprocalSqrtRow {
    pub m: u64,
    #[serde(rename = "M")]
    pub num_types: usize,
    #[serde(with = "num17")]
    pub exact_sum: f64,
    #[serde(with = "num17")]
    pub bound: f64,
    pub pass: bool,
}

/// Reciprocal square-root sum check over `1 <= M <= max_types`, `M <= m <= max_m`.
pub fn reciprocal_sqrt_sweep(max_m: u64, max_types: usize) -> Result<Vec<ReciprocalSqrtRow>> {
    let mut rows = Vec::new();
    for num_types in 1..=max_types {
        for m in num_types as u64..=max_m {
            let check = reciprocal_sqrt_sum_check(m, num_types)?;
            rows.push(ReciprocalSqrtRow {
                m,
                num_types,
                exact_sum: check.exact_sum,
                bound: check.bound,
                pass: check.holds(),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Budget,
    Domination,
    ReciprocalSqrt,
    MarginalEquality,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "budget" => Ok(Suite::Budget),
            "domination" | "lemma5" => Ok(Suite::Domination),
            "reciprocal-sqrt" | "lemma7" => Ok(Suite::ReciprocalSqrt),
            "marginal-equality" | "prop8" => Ok(Suite::MarginalEquality),
            "all" => Ok(Suite::All),
            other => Err(Error::InvalidArgument(format!(
                "unknown suite '{other}' (expected budget, domination, reciprocal-sqrt, marginal-equality or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginalCase {
    pub dim: usize,
    pub j: usize,
    #[serde(with = "num17")]
    pub p_j: f64,
    pub witness: MarginalWitness,
    #[serde(with = "num17")]
    pub min_perturbation_gap: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<Vec<ViolationReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domination: Option<Vec<DominationReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reciprocal_sqrt: Option<Vec<ReciprocalSqrtRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub marginal_equality: Option<Vec<MarginalCase>>,
}

impl VerificationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Two labels, three constant hypotheses, correct/incorrect partition.
pub fn reference_world(posterior: SimplexVector, seed: u64) -> Result<SyntheticWorld> {
    let partition = ErrorPartition::correct_incorrect(2, LossVector::new(vec![0.0, 1.0])?)?;
    SyntheticWorld::constant_hypotheses(
        SimplexVector::new(vec![0.6, 0.4])?,
        vec![
            SimplexVector::new(vec![0.9, 0.1])?,
            SimplexVector::new(vec![0.5, 0.5])?,
            SimplexVector::new(vec![0.2, 0.8])?,
        ],
        SimplexVector::uniform(3)?,
        posterior,
        partition,
        seed,
    )
}

pub fn budget_suite(seed: u64) -> Result<Vec<ViolationReport>> {
    let equal = reference_world(SimplexVector::uniform(3)?, seed)?;
    let shifted = reference_world(
        SimplexVector::new(vec![0.7, 0.2, 0.1])?,
        seed.wrapping_add(1),
    )?;
    Ok(vec![
        mc_bound_violation(&equal, 100, 0.05, 2000, ConstantMode::Exact)?,
        mc_bound_violation(&shifted, 100, 0.05, 2000, ConstantMode::Exact)?,
        mc_bound_violation(&equal, 30, 0.5, 2000, ConstantMode::Exact)?,
    ])
}

pub const DIRICHLET_CONCENTRATIONS: [f64; 3] = [0.5, 2.0, 10.0];

pub fn domination_suite(seed: u64, samples: usize) -> Result<Vec<DominationReport>> {
    let mu = SimplexVector::uniform(3)?;
    let skewed = SimplexVector::new(vec![0.6, 0.3, 0.1])?;
    let mut out = Vec::new();
    for (i, &c) in DIRICHLET_CONCENTRATIONS.iter().enumerate() {
        out.push(mc_multinomial_domination(
            &mu,
            5,
            samples,
            InnerLaw::Dirichlet { concentration: c },
            seed + i as u64,
        )?);
    }
    for (i, &c) in DIRICHLET_CONCENTRATIONS.iter().enumerate() {
        let law = InnerLaw::Dirichlet { concentration: c };
        out.push(mc_multinomial_domination(
            &skewed,
            5,
            samples,
            law,
            seed + 10 + i as u64,
        )?);
    }
    Ok(out)
}

pub fn marginal_suite(seed: u64, cases: usize) -> Result<Vec<MarginalCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases);
    for case in 0..cases {
        let dim = rng.random_range(2..=6);
        let w: Vec<f64> = (0..dim).map(|_| rng.random_range(0.01..1.0)).collect();
        let q = SimplexVector::from_weights(&w)?;
        let j = rng.random_range(0..dim);
        let p_j = rng.random_range(0.001..0.999);
        let witness = marginal_equality_witness(&q, j, p_j)?;
        let gap = marginal_perturbation_gap(&q, j, p_j, 20, seed.wrapping_add(case as u64))?;
        let scale = witness.kl_marginal.max(1.0);
        let pass = (witness.kl_joint - witness.kl_marginal).abs() <= 1e-12 * scale
            && gap >= -1e-12 * scale;
        out.push(MarginalCase {
            dim,
            j,
            p_j,
            witness,
            min_perturbation_gap: gap,
            pass,
        });
    }
    Ok(out)
}

pub fn run_verification(suite: Suite, seed: u64) -> Result<VerificationReport> {
    let want = |s: Suite| suite == s || suite == Suite::All;
    let budget = want(Suite::Budget)
        .then(|| budget_suite(seed))
        .transpose()?;
    let domination = want(Suite::Domination)
        .then(|| domination_suite(seed, 100_000))
        .transpose()?;
    let reciprocal_sqrt = want(Suite::ReciprocalSqrt)
        .then(|| reciprocal_sqrt_sweep(14, 5))
        .transpose()?;
    let marginal_equality = want(Suite::MarginalEquality)
        .then(|| marginal_suite(seed, 100))
        .transpose()?;
    let pass = budget.iter().flatten().all(|r| r.pass)
        && domination.iter().flatten().all(|r| r.pass)
        && reciprocal_sqrt.iter().flatten().all(|r| r.pass)
        && marginal_equality.iter().flatten().all(|r| r.pass);
    Ok(VerificationReport {
        seed,
        pass,
        budget,
        domination,
        reciprocal_sqrt,
        marginal_equality,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_feature_world(seed: u64) -> SyntheticWorld {
        let s = |v: Vec<f64>| SimplexVector::new(v).unwrap();
        let part =
            ErrorPartition::fully_refined(2, LossVector::new(vec![0.0, 1.0, 2.0, 0.0]).unwrap())
                .unwrap();
        SyntheticWorld::new(
            s(vec![0.3, 0.7]),
            vec![s(vec![0.8, 0.2]), s(vec![0.25, 0.75])],
            vec![
                vec![s(vec![0.9, 0.1]), s(vec![0.3, 0.7])],
                vec![s(vec![0.5, 0.5]), s(vec![0.6, 0.4])],
            ],
            s(vec![0.5, 0.5]),
            s(vec![0.8, 0.2]),
            part,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn true_risk_by_hand() {
        // constant hypotheses: R_D(h)[incorrect] = sum_y pi_y (1 - h[y])
        let world = reference_world(SimplexVector::uniform(3).unwrap(), 0).unwrap();
        let err = |h: [f64; 2]| 0.6 * (1.0 - h[0]) + 0.4 * (1.0 - h[1]);
        let expected = (err([0.9, 0.1]) + err([0.5, 0.5]) + err([0.2, 0.8])) / 3.0;
        let r = world.true_risk().unwrap();
        assert!((r.get(1) - expected).abs() < 1e-15);
        assert_eq!(world.kl_qp().unwrap(), 0.0);
    }

    #[test]
    fn violation_examples() {
        let world = reference_world(SimplexVector::uniform(3).unwrap(), 4).unwrap();
        let r = mc_bound_violation(&world, 100, 0.05, 2000, ConstantMode::Exact).unwrap();
        assert!(r.fraction <= 0.05, "{r:?}");
        let loose = mc_bound_violation(&world, 100, 1.0, 500, ConstantMode::Exact).unwrap();
        assert!(loose.budget >= 0.0 && loose.fraction < 0.5);

        let one = |v: Vec<f64>| SimplexVector::new(v).unwrap();
        let part =
            ErrorPartition::correct_incorrect(2, LossVector::new(vec![0.0, 1.0]).unwrap()).unwrap();
        let deterministic = SyntheticWorld::constant_hypotheses(
            one(vec![1.0, 0.0]),
            vec![one(vec![1.0, 0.0]), one(vec![0.0, 1.0])],
            SimplexVector::uniform(2).unwrap(),
            SimplexVector::uniform(2).unwrap(),
            part,
            9,
        )
        .unwrap();
        let r = mc_bound_violation(&deterministic, 1, 0.05, 200, ConstantMode::Exact).unwrap();
        assert_eq!(r.violations, 0);
    }

    #[test]
    fn large_sample_matches_closed_form() {
        let world = two_feature_world(3);
        let check = empirical_risk_limit_check(&world, 100_000).unwrap();
        assert!(check.max_z < 4.0, "{check:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        #[test]
        fn exact_constant_keeps_violations_below_delta(
            seed in 0u64..1000,
            m in 5u64..40,
            delta in 0.05f64..0.5,
        ) {
            let world = two_feature_world(seed);
            let r = mc_bound_violation(&world, m, delta, 300, ConstantMode::Exact).unwrap();
            prop_assert!(r.pass, "{:?}", r);
        }
    }

    #[test]
    fn domination_trivial_laws() {
        let mu = SimplexVector::new(vec![0.5, 0.3, 0.2]).unwrap();
        let same = mc_multinomial_domination(&mu, 4, 2000, InnerLaw::Categorical, 1).unwrap();
        assert_eq!(same.lhs, same.rhs);
        assert_eq!(same.diff_se, 0.0);
        let point = mc_multinomial_domination(&mu, 4, 2000, InnerLaw::PointMass, 1).unwrap();
        assert!((point.lhs - 1.0).abs() < 1e-12);
        assert!(point.pass && point.rhs >= 1.0);
        assert!(mc_multinomial_domination(
            &mu,
            4,
            2000,
            InnerLaw::Dirichlet { concentration: 0.0 },
            1
        )
        .is_err());
        let boundary = SimplexVector::new(vec![1.0, 0.0]).unwrap();
        assert!(mc_multinomial_domination(
            &boundary,
            4,
            10,
            InnerLaw::Dirichlet { concentration: 1.0 },
            1
        )
        .is_err());
    }

    #[test]
    fn domination_dirichlet_uniform() {
        let mu = SimplexVector::uniform(3).unwrap();
        let r = mc_multinomial_domination(
            &mu,
            5,
            20_000,
            InnerLaw::Dirichlet { concentration: 2.0 },
            7,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.lhs < r.rhs);
    }

    #[test]
    fn marginal_equality_examples() {
        let q = SimplexVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        let w = marginal_equality_witness(&q, 1, 0.4).unwrap();
        assert!((w.kl_joint - w.kl_marginal).abs() < 1e-12);
        let expected_p0 = 0.6 / 0.7 * 0.2;
        assert!((w.p[0] - expected_p0).abs() < 1e-15);

        let same = marginal_equality_witness(&q, 2, 0.5).unwrap();
        assert!(same.kl_joint.abs() < 1e-15 && same.kl_marginal.abs() < 1e-15);

        assert!(marginal_perturbation_gap(&q, 1, 0.4, 50, 3).unwrap() > 0.0);
        assert!(marginal_equality_witness(&SimplexVector::one_hot(3, 0).unwrap(), 0, 0.5).is_err());
        assert!(marginal_equality_witness(&q, 0, 1.0).is_err());
        assert!(marginal_equality_witness(&q, 3, 0.5).is_err());
    }

    #[test]
    fn reciprocal_sqrt_grid() {
        let rows = reciprocal_sqrt_sweep(14, 5).unwrap();
        assert_eq!(rows.len(), 14 + 13 + 12 + 11 + 10);
        assert!(rows.iter().all(|r| r.pass));
        let first = &rows[0];
        assert_eq!((first.m, first.num_types), (1, 1));
        assert!((first.exact_sum - first.bound).abs() < 1e-12);
    }

    #[test]
    fn suites_parse_and_report() {
        assert_eq!(
            "marginal-equality".parse::<Suite>().unwrap(),
            Suite::MarginalEquality
        );
        assert_eq!("prop8".parse::<Suite>().unwrap(), Suite::MarginalEquality);
        assert!("unknown".parse::<Suite>().is_err());
        let report = run_verification(Suite::ReciprocalSqrt, 0).unwrap();
        assert!(report.pass && report.budget.is_none());
        let json = report.to_json().unwrap();
        assert!(json.contains("\"reciprocal_sqrt\"") && !json.contains("\"marginal_equality\""));
        let again = run_verification(Suite::MarginalEquality, 5).unwrap();
        assert_eq!(again, run_verification(Suite::MarginalEquality, 5).unwrap());
        assert!(again.pass);
    }
}
