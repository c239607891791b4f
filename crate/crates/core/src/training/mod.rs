//! Gradient descent on the total-risk bound for a Gaussian posterior over
//! the weights of a soft classifier.

mod data;
mod gaussian;
mod model;
mod partition;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{gaussian_blobs, split_indices, LabelledDataset};
pub use gaussian::{
    gaussian_kl, gaussian_kl_gradient, pathwise_sample, standard_normal_draws, GaussianPosterior,
    PriorProvenance, PriorSpec,
};
pub use model::{softmax, AffineSoftmax, SoftModel};
pub use partition::{CellSelector, ErrorPartition, PartitionConfig, PartitionRule};

use crate::constants::{log_i_kl, ConstantMode};
use crate::error::{check_dims, Error, Result};
use crate::kl_inverse::{grad_f_star, kl_inverse_total};
use crate::num17;
use crate::risk_bounds::{build_certificate, smooth_risk, BoundCertificate, PacBayesInputs};
use crate::simplex::SimplexVector;

/// Concrete soft hypothesis used by the CLI: `softmax(W x + b)`.
pub fn reference_model_forward(theta: &[f64], x: &[f64], classes: usize) -> Result<Vec<f64>> {
    let model = AffineSoftmax::new(x.len(), classes);
    check_dims(model.num_params(), theta.len())?;
    Ok(model.forward(theta, x))
}

fn check_model<M: SoftModel + ?Sized>(
    model: &M,
    data: &LabelledDataset,
    part: &ErrorPartition,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidDataset("dataset is empty".into()));
    }
    if model.num_classes() != part.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "model has {} classes, partition has {}",
            model.num_classes(),
            part.num_classes()
        )));
    }
    if data.num_classes() > part.num_classes() {
        return Err(Error::InvalidDataset(format!(
            "dataset declares {} classes, partition only {}",
            data.num_classes(),
            part.num_classes()
        )));
    }
    check_dims(model.input_dim(), data.feature_dim())
}

fn raw_to_simplex(raw: Vec<f64>, m: usize) -> Result<SimplexVector> {
    let scale = 1.0 / m as f64;
    SimplexVector::new(
        raw.into_iter()
            .map(|r| (r * scale).clamp(0.0, 1.0))
            .collect(),
    )
}

/// Soft empirical risk vector: `u_j = (1/m) sum_rows sum_{pred in type j} h(x)[pred]`.
pub fn soft_risk_vector<M: SoftModel + ?Sized>(
    model: &M,
    theta: &[f64],
    data: &LabelledDataset,
    part: &ErrorPartition,
) -> Result<SimplexVector> {
    check_model(model, data, part)?;
    check_dims(model.num_params(), theta.len())?;
    let mut raw = vec![0.0; part.num_types()];
    for (x, y) in data.rows() {
        for (pred, p) in model.forward(theta, x).into_iter().enumerate() {
            raw[part.type_of(pred, y)] += p;
        }
    }
    raw_to_simplex(raw, data.len())
}

/// Soft risk vector together with its `M x N` Jacobian in `theta`.
pub fn soft_risk_with_jacobian<M: SoftModel + ?Sized>(
    model: &M,
    theta: &[f64],
    data: &LabelledDataset,
    part: &ErrorPartition,
) -> Result<(SimplexVector, Vec<Vec<f64>>)> {
    check_model(model, data, part)?;
    let n = model.num_params();
    check_dims(n, theta.len())?;
    let mut raw = vec![0.0; part.num_types()];
    let mut jac = vec![vec![0.0; n]; part.num_types()];
    for (x, y) in data.rows() {
        let probs = model.forward(theta, x);
        let row_jac = model.jacobian(theta, x);
        for (pred, p) in probs.into_iter().enumerate() {
            let j = part.type_of(pred, y);
            raw[j] += p;
            for (acc, d) in jac[j].iter_mut().zip(&row_jac[pred * n..(pred + 1) * n]) {
                *acc += d;
            }
        }
    }
    let scale = 1.0 / data.len() as f64;
    for row in &mut jac {
        row.iter_mut().for_each(|d| *d *= scale);
    }
    Ok((raw_to_simplex(raw, data.len())?, jac))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    #[default]
    Analytic,
    FiniteDifference,
}

/// What a step does when a risk vector lands on the simplex boundary.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum BoundaryPolicy {
    #[default]
    Skip,
    Smooth {
        alpha: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorPolicy {
    #[default]
    Fixed,
    TrainedOnPriorSplit,
}

fn default_epochs() -> usize {
    200
}
fn default_learning_rate() -> f64 {
    0.5
}
fn default_delta() -> f64 {
    0.05
}
fn default_mode() -> ConstantMode {
    ConstantMode::Stirling
}
fn default_split() -> f64 {
    0.5
}
fn default_one() -> usize {
    1
}
fn default_prior_var() -> f64 {
    1.0
}
fn default_cert_samples() -> usize {
    100
}
fn default_prior_epochs() -> usize {
    100
}
fn default_fd_step() -> f64 {
    1e-5
}
fn default_tol() -> f64 {
    crate::kl_inverse::DEFAULT_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_mode")]
    pub mode: ConstantMode,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of rows reserved for the prior when it is trained.
    #[serde(default = "default_split")]
    pub prior_split: f64,
    #[serde(default)]
    pub prior: PriorPolicy,
    #[serde(default)]
    pub gradient: GradientMode,
    /// Rows per step; `None` means full batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Noise draws averaged per step.
    #[serde(default = "default_one")]
    pub mc_draws: usize,
    #[serde(default = "default_prior_var")]
    pub prior_var: f64,
    /// Initial posterior log-variance; defaults to the prior's.
    #[serde(default)]
    pub init_log_var: Option<f64>,
    #[serde(default)]
    pub boundary: BoundaryPolicy,
    /// Posterior draws averaged for the certificate's empirical risk.
    #[serde(default = "default_cert_samples")]
    pub cert_samples: usize,
    #[serde(default = "default_prior_epochs")]
    pub prior_epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub prior_learning_rate: f64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad(format!("delta must lie in (0, 1], got {}", self.delta));
        }
        if self.prior == PriorPolicy::TrainedOnPriorSplit
            && !(self.prior_split > 0.0 && self.prior_split < 1.0)
        {
            return bad(format!(
                "prior split must lie in (0, 1), got {}",
                self.prior_split
            ));
        }
        if self.mc_draws == 0 || self.cert_samples == 0 {
            return bad("mc_draws and cert_samples must be positive".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch size must be positive".into());
        }
        if !(self.prior_var > 0.0 && self.prior_var.is_finite()) {
            return bad(format!(
                "prior variance must be positive, got {}",
                self.prior_var
            ));
        }
        if !(self.fd_step > 0.0) || !(self.tol > 0.0) {
            return bad("fd_step and tol must be positive".into());
        }
        if let BoundaryPolicy::Smooth { alpha } = self.boundary {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return bad(format!("smoothing alpha must be positive, got {alpha}"));
            }
        }
        Ok(())
    }
}

/// Value of the bound objective at one noise draw.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    #[serde(with = "num17::vec")]
    pub risk: Vec<f64>,
    #[serde(with = "num17")]
    pub kl_qp: f64,
    #[serde(with = "num17")]
    pub budget: f64,
    #[serde(with = "num17")]
    pub f_star: f64,
}

/// Everything a step needs besides the batch and the mutable state.
pub struct BoundObjective<'a, M: SoftModel + ?Sized> {
    pub model: &'a M,
    pub partition: &'a ErrorPartition,
    pub prior: &'a PriorSpec,
    /// Certified sample size used in the budget.
    pub m_bound: u64,
    pub log_constant: f64,
    pub delta: f64,
    pub boundary: BoundaryPolicy,
    pub tol: f64,
}

impl<'a, M: SoftModel + ?Sized> BoundObjective<'a, M> {
    pub fn new(
        model: &'a M,
        partition: &'a ErrorPartition,
        prior: &'a PriorSpec,
        m_bound: u64,
        config: &TrainConfig,
    ) -> Result<Self> {
        Ok(Self {
            model,
            partition,
            prior,
            m_bound,
            log_constant: log_i_kl(m_bound, partition.num_types(), config.mode)?,
            delta: config.delta,
            boundary: config.boundary,
            tol: config.tol,
        })
    }

    pub fn budget(&self, q: &GaussianPosterior) -> Result<(f64, f64)> {
        let kl = gaussian_kl(q, self.prior)?;
        Ok((
            kl,
            (kl + self.log_constant - self.delta.ln()) / self.m_bound as f64,
        ))
    }

    /// `(dB/dw, dB/dzeta)`; the constant term contributes nothing.
    pub fn budget_gradient(&self, q: &GaussianPosterior) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mut dw, mut dz) = gaussian_kl_gradient(q, self.prior)?;
        let m = self.m_bound as f64;
        dw.iter_mut().chain(dz.iter_mut()).for_each(|g| *g /= m);
        Ok((dw, dz))
    }

    /// Applies the boundary policy; returns the risk to bound and `du'/du`.
    fn admissible_risk(&self, u: SimplexVector, rows: usize) -> Result<(SimplexVector, f64)> {
        match (u.first_zero(), self.boundary) {
            (None, _) => Ok((u, 1.0)),
            (Some(index), BoundaryPolicy::Skip) => Err(Error::BoundaryRisk { index }),
            (Some(_), BoundaryPolicy::Smooth { alpha }) => {
                let m = rows as f64;
                let scale = m / (m + u.dim() as f64 * alpha);
                Ok((smooth_risk(&u, rows as u64, alpha)?, scale))
            }
        }
    }

    pub fn evaluate(
        &self,
        q: &GaussianPosterior,
        eps: &[f64],
        batch: &LabelledDataset,
    ) -> Result<Evaluation> {
        let theta = pathwise_sample(q, eps)?;
        let u = soft_risk_vector(self.model, &theta, batch, self.partition)?;
        let (u, _) = self.admissible_risk(u, batch.len())?;
        let (kl, budget) = self.budget(q)?;
        let sol = kl_inverse_total(&u, budget, self.partition.losses(), self.tol)?;
        Ok(Evaluation {
            risk: u.into_vec(),
            kl_qp: kl,
            budget,
            f_star: sol.f_star,
        })
    }

    /// Pathwise gradient `H = G F` of `f*(u(p), B(p))` for `p = w ++ zeta`.
    pub fn gradient(
        &self,
        q: &GaussianPosterior,
        eps: &[f64],
        batch: &LabelledDataset,
    ) -> Result<(Evaluation, Vec<f64>)> {
        let n = q.dim();
        let theta = pathwise_sample(q, eps)?;
        let (u, jac) = soft_risk_with_jacobian(self.model, &theta, batch, self.partition)?;
        let (u, scale) = self.admissible_risk(u, batch.len())?;
        let (kl, budget) = self.budget(q)?;
        let sol = kl_inverse_total(&u, budget, self.partition.losses(), self.tol)?;
        let (grad_u, grad_c) = grad_f_star(&sol, &u)?;
        let (db_dw, db_dz) = self.budget_gradient(q)?;

        let mut h = vec![0.0; 2 * n];
        for i in 0..n {
            let d_theta: f64 = grad_u
                .iter()
                .zip(&jac)
                .map(|(g, row)| g * row[i])
                .sum::<f64>()
                * scale;
            let d_theta_d_zeta = 0.5 * eps[i] * (0.5 * q.log_var[i]).exp();
            h[i] = d_theta + grad_c * db_dw[i];
            h[n + i] = d_theta * d_theta_d_zeta + grad_c * db_dz[i];
        }
        Ok((
            Evaluation {
                risk: u.into_vec(),
                kl_qp: kl,
                budget,
                f_star: sol.f_star,
            },
            h,
        ))
    }

    /// Central finite differences of [`Self::evaluate`] with `eps` held fixed.
    pub fn fd_gradient(
        &self,
        q: &GaussianPosterior,
        eps: &[f64],
        batch: &LabelledDataset,
        step: f64,
    ) -> Result<(Evaluation, Vec<f64>)> {
        let base = q.to_params();
        let mut probe = base.clone();
        let mut h = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            probe[i] = base[i] + step;
            let plus = self
                .evaluate(&GaussianPosterior::from_params(&probe)?, eps, batch)?
                .f_star;
            probe[i] = base[i] - step;
            let minus = self
                .evaluate(&GaussianPosterior::from_params(&probe)?, eps, batch)?
                .f_star;
            probe[i] = base[i];
            h.push((plus - minus) / (2.0 * step));
        }
        Ok((self.evaluate(q, eps, batch)?, h))
    }
}

/// Mutable training state: the posterior and the noise generator.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub posterior: GaussianPosterior,
    pub steps: usize,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(posterior: GaussianPosterior, seed: u64) -> Self {
        Self {
            posterior,
            steps: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    /// `None` when the step was skipped.
    pub evaluation: Option<Evaluation>,
    #[serde(with = "num17")]
    pub grad_norm: f64,
    pub warning: Option<String>,
}

/// One loop body: draw noise, evaluate the bound gradient, descend.
pub fn training_step<M: SoftModel + ?Sized>(
    state: &mut TrainState,
    objective: &BoundObjective<'_, M>,
    batch: &LabelledDataset,
    config: &TrainConfig,
) -> Result<StepDiagnostics> {
    let n = state.posterior.dim();
    let draws: Vec<Vec<f64>> = (0..config.mc_draws)
        .map(|_| standard_normal_draws(&mut state.rng, n))
        .collect();
    state.steps += 1;

    let mut total = vec![0.0; 2 * n];
    let mut last = None;
    for eps in &draws {
        let result = match config.gradient {
            GradientMode::Analytic => objective.gradient(&state.posterior, eps, batch),
            GradientMode::FiniteDifference => {
                objective.fd_gradient(&state.posterior, eps, batch, config.fd_step)
            }
        };
        let (eval, h) = match result {
            Ok(v) => v,
            Err(Error::BoundaryRisk { index }) => {
                return Ok(StepDiagnostics {
                    evaluation: None,
                    grad_norm: 0.0,
                    warning: Some(format!(
                        "step {}: risk type {index} is empty on this batch, step skipped",
                        state.steps
                    )),
                });
            }
            Err(e) => return Err(e),
        };
        for (t, g) in total.iter_mut().zip(&h) {
            *t += g;
        }
        last = Some(eval);
    }
    let k = config.mc_draws as f64;
    total.iter_mut().for_each(|g| *g /= k);
    let evaluation = last.expect("at least one draw");

    if let Some(i) = total.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            step: state.steps,
            detail: format!(
                "component {i} is {}; risk {:?}, budget {}, f* {}",
                total[i], evaluation.risk, evaluation.budget, evaluation.f_star
            ),
        });
    }
    let grad_norm = total.iter().map(|g| g * g).sum::<f64>().sqrt();
    let params: Vec<f64> = state
        .posterior
        .to_params()
        .iter()
        .zip(&total)
        .map(|(p, g)| p - config.learning_rate * g)
        .collect();
    state.posterior = GaussianPosterior::from_params(&params)?;
    Ok(StepDiagnostics {
        evaluation: Some(evaluation),
        grad_norm,
        warning: None,
    })
}

/// Prior mean fitted by gradient descent on the deterministic total risk
/// `l . u(theta)` over the prior rows only; variances stay at `var`.
pub fn train_prior_mean<M: SoftModel + ?Sized>(
    model: &M,
    prior_rows: &LabelledDataset,
    part: &ErrorPartition,
    var: f64,
    epochs: usize,
    learning_rate: f64,
) -> Result<PriorSpec> {
    let n = model.num_params();
    let mut theta = vec![0.0; n];
    let losses = part.losses().as_slice();
    for _ in 0..epochs {
        let (_, jac) = soft_risk_with_jacobian(model, &theta, prior_rows, part)?;
        for (i, t) in theta.iter_mut().enumerate() {
            let g: f64 = losses.iter().zip(&jac).map(|(l, row)| l * row[i]).sum();
            *t -= learning_rate * g;
        }
    }
    PriorSpec::new(theta, vec![var; n], PriorProvenance::TrainedOnPriorSplit)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub skipped: usize,
    /// Diagnostics of the epoch's last completed step.
    pub last: Option<Evaluation>,
    #[serde(with = "num17")]
    pub grad_norm: f64,
}

pub fn history_to_jsonl(history: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for record in history {
        writeln!(out, "{}", serde_json::to_string(record)?).expect("writing to a String");
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub prior: PriorSpec,
    pub initial_posterior: GaussianPosterior,
    pub posterior: GaussianPosterior,
    pub initial_certificate: BoundCertificate,
    pub certificate: BoundCertificate,
    pub history: Vec<EpochRecord>,
    pub warnings: Vec<String>,
    /// Row indices of the certified sample.
    pub bound_rows: Vec<usize>,
}

/// Monte Carlo estimate of `R_S(Q)`: the average soft risk vector over
/// `samples` posterior draws.
pub fn estimate_posterior_risk<M: SoftModel + ?Sized>(
    model: &M,
    q: &GaussianPosterior,
    data: &LabelledDataset,
    part: &ErrorPartition,
    samples: usize,
    seed: u64,
) -> Result<SimplexVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut acc = vec![0.0; part.num_types()];
    for _ in 0..samples {
        let eps = standard_normal_draws(&mut rng, q.dim());
        let u = soft_risk_vector(model, &pathwise_sample(q, &eps)?, data, part)?;
        acc.iter_mut().zip(u.as_slice()).for_each(|(a, v)| *a += v);
    }
    SimplexVector::new(acc.into_iter().map(|a| a / samples as f64).collect())
}

/// Certificate on the bound rows for posterior `q`.
pub fn posterior_certificate<M: SoftModel + ?Sized>(
    model: &M,
    q: &GaussianPosterior,
    prior: &PriorSpec,
    bound_rows: &LabelledDataset,
    part: &ErrorPartition,
    config: &TrainConfig,
) -> Result<BoundCertificate> {
    let risk =
        estimate_posterior_risk(model, q, bound_rows, part, config.cert_samples, config.seed)?;
    let inputs = PacBayesInputs::new(
        bound_rows.len() as u64,
        config.delta,
        gaussian_kl(q, prior)?,
        risk,
    )?;
    let alpha = match config.boundary {
        BoundaryPolicy::Smooth { alpha } => Some(alpha),
        BoundaryPolicy::Skip => None,
    };
    build_certificate(&inputs, config.mode, Some(part.losses()), alpha)
}

/// Builds the prior and returns it with the certified row indices. A trained
/// prior only ever sees the rows of the prior split.
pub fn fit_prior<M: SoftModel + ?Sized>(
    model: &M,
    dataset: &LabelledDataset,
    part: &ErrorPartition,
    config: &TrainConfig,
) -> Result<(PriorSpec, Vec<usize>)> {
    let n = model.num_params();
    match config.prior {
        PriorPolicy::Fixed => Ok((
            PriorSpec::isotropic(n, config.prior_var)?,
            (0..dataset.len()).collect(),
        )),
        PriorPolicy::TrainedOnPriorSplit => {
            let (prior_idx, bound_idx) =
                split_indices(dataset.len(), config.prior_split, config.seed)?;
            let prior = train_prior_mean(
                model,
                &dataset.subset(&prior_idx),
                part,
                config.prior_var,
                config.prior_epochs,
                config.prior_learning_rate,
            )?;
            Ok((prior, bound_idx))
        }
    }
}

/// Runs the full training loop and certifies the result on the bound rows.
pub fn train<M: SoftModel + ?Sized>(
    model: &M,
    dataset: &LabelledDataset,
    part: &ErrorPartition,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_model(model, dataset, part)?;
    let n = model.num_params();

    let (prior, bound_idx) = fit_prior(model, dataset, part, config)?;
    let bound_rows = dataset.subset(&bound_idx);
    let objective = BoundObjective::new(model, part, &prior, bound_rows.len() as u64, config)?;

    let init_log_var = config.init_log_var.unwrap_or_else(|| config.prior_var.ln());
    let initial = GaussianPosterior::new(prior.mean.clone(), vec![init_log_var; n])?;
    let initial_certificate =
        posterior_certificate(model, &initial, &prior, &bound_rows, part, config)?;

    let batches = dataset.batches(config.batch_size.unwrap_or(dataset.len()));
    let mut state = TrainState::new(initial.clone(), config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    let mut warnings = Vec::new();
    for epoch in 0..config.epochs {
        let mut record = EpochRecord {
            epoch,
            steps: 0,
            skipped: 0,
            last: None,
            grad_norm: 0.0,
        };
        for batch in &batches {
            let diag = training_step(&mut state, &objective, batch, config)?;
            record.steps += 1;
            match diag.evaluation {
                Some(eval) => {
                    record.last = Some(eval);
                    record.grad_norm = diag.grad_norm;
                }
                None => record.skipped += 1,
            }
            warnings.extend(diag.warning);
        }
        history.push(record);
    }

    let certificate =
        posterior_certificate(model, &state.posterior, &prior, &bound_rows, part, config)?;
    Ok(TrainOutcome {
        prior,
        initial_posterior: initial,
        posterior: state.posterior,
        initial_certificate,
        certificate,
        history,
        warnings,
        bound_rows: bound_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::risk_bounds::revalidate_certificate;
    use crate::simplex::LossVector;

    /// Puts all mass on the true label, ignoring `theta`.
    struct Oracle {
        classes: usize,
        dim: usize,
        labels: Vec<(Vec<f64>, usize)>,
    }

    impl SoftModel for Oracle {
        fn num_params(&self) -> usize {
            1
        }
        fn num_classes(&self) -> usize {
            self.classes
        }
        fn input_dim(&self) -> usize {
            self.dim
        }
        fn forward(&self, _theta: &[f64], x: &[f64]) -> Vec<f64> {
            let y = self
                .labels
                .iter()
                .find(|(f, _)| f.as_slice() == x)
                .unwrap()
                .1;
            (0..self.classes)
                .map(|k| if k == y { 1.0 } else { 0.0 })
                .collect()
        }
    }

    fn small_dataset() -> LabelledDataset {
        let features: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![i as f64 * 0.3 - 1.0, (i % 3) as f64])
            .collect();
        let labels = vec![0, 1, 2, 0, 0, 2, 1, 0, 2, 2];
        LabelledDataset::new(features, labels, 3).unwrap()
    }

    fn losses(v: &[f64]) -> LossVector {
        LossVector::new(v.to_vec()).unwrap()
    }

    fn refined3() -> ErrorPartition {
        let mut l = vec![1.0; 9];
        for k in 0..3 {
            l[k * 3 + k] = 0.0;
        }
        l[2 * 3] = 2.0;
        ErrorPartition::fully_refined(3, losses(&l)).unwrap()
    }

    #[test]
    fn soft_risk_examples() {
        let data = small_dataset();
        let coarse = ErrorPartition::correct_incorrect(3, losses(&[0.0, 1.0])).unwrap();
        let oracle = Oracle {
            classes: 3,
            dim: 2,
            labels: data.rows().map(|(x, y)| (x.to_vec(), y)).collect(),
        };
        assert_eq!(
            soft_risk_vector(&oracle, &[0.0], &data, &coarse)
                .unwrap()
                .as_slice(),
            &[1.0, 0.0]
        );

        let model = AffineSoftmax::new(2, 3);
        let zero = vec![0.0; model.num_params()];
        let u = soft_risk_vector(&model, &zero, &data, &coarse).unwrap();
        assert!((u.get(0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((u.get(1) - 2.0 / 3.0).abs() < 1e-15);

        let empty = LabelledDataset::new(vec![], vec![], 3).unwrap();
        assert!(soft_risk_vector(&model, &zero, &empty, &coarse).is_err());
    }

    #[test]
    fn refined_marginal_is_label_frequency() {
        let data = small_dataset();
        let part = refined3();
        let model = AffineSoftmax::new(2, 3);
        let theta: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) * 0.37).collect();
        let u = soft_risk_vector(&model, &theta, &data, &part).unwrap();
        let mut counts = [0usize; 3];
        for &y in data.labels() {
            counts[y] += 1;
        }
        for truth in 0..3 {
            let marginal: f64 = (0..3).map(|pred| u.get(part.type_of(pred, truth))).sum();
            assert!((marginal - counts[truth] as f64 / 10.0).abs() < 1e-12);
        }
        let total: f64 = u.as_slice().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn risk_jacobian_matches_finite_differences() {
        let data = small_dataset();
        let part = refined3();
        let model = AffineSoftmax::new(2, 3);
        let theta: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
        let (_, jac) = soft_risk_with_jacobian(&model, &theta, &data, &part).unwrap();
        for i in 0..9 {
            let h = 1e-6;
            let mut plus = theta.clone();
            plus[i] += h;
            let mut minus = theta.clone();
            minus[i] -= h;
            let up = soft_risk_vector(&model, &plus, &data, &part).unwrap();
            let dn = soft_risk_vector(&model, &minus, &data, &part).unwrap();
            for j in 0..9 {
                let fd = (up.get(j) - dn.get(j)) / (2.0 * h);
                assert!((fd - jac[j][i]).abs() < 1e-8);
            }
        }
    }

    fn objective_fixture() -> (AffineSoftmax, ErrorPartition, PriorSpec, LabelledDataset) {
        let data = gaussian_blobs(
            &[vec![0.0, 1.5], vec![1.5, 0.0], vec![-1.5, -1.5]],
            0.8,
            8,
            4,
        )
        .unwrap();
        (
            AffineSoftmax::new(2, 3),
            refined3(),
            PriorSpec::isotropic(9, 1.0).unwrap(),
            data,
        )
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn budget_gradient_is_scaled_kl_gradient() {
        let (model, part, prior, _) = objective_fixture();
        let config = TrainConfig::default();
        let obj = BoundObjective::new(&model, &part, &prior, 600, &config).unwrap();
        let q = GaussianPosterior::new((0..9).map(|i| 0.1 * i as f64).collect(), vec![-0.7; 9])
            .unwrap();
        let (dw, dz) = obj.budget_gradient(&q).unwrap();
        let analytic: Vec<f64> = dw.into_iter().chain(dz).collect();
        let base = q.to_params();
        for (i, g) in analytic.iter().enumerate() {
            let h = 1e-5;
            let mut p = base.clone();
            p[i] += h;
            let up = obj
                .budget(&GaussianPosterior::from_params(&p).unwrap())
                .unwrap()
                .1;
            p[i] -= 2.0 * h;
            let dn = obj
                .budget(&GaussianPosterior::from_params(&p).unwrap())
                .unwrap()
                .1;
            assert!(rel_err((up - dn) / (2.0 * h), *g) < 1e-5, "param {i}");
        }
    }

    #[test]
    fn gradient_chain_matches_finite_differences() {
        let (model, part, prior, data) = objective_fixture();
        let config = TrainConfig::default();
        let obj = BoundObjective::new(&model, &part, &prior, data.len() as u64, &config).unwrap();
        let q = GaussianPosterior::new(
            (0..9).map(|i| ((i * 5 % 7) as f64 - 3.0) * 0.4).collect(),
            vec![-1.2; 9],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eps = standard_normal_draws(&mut rng, 9);
        let (eval, h) = obj.gradient(&q, &eps, &data).unwrap();
        let (eval_fd, h_fd) = obj.fd_gradient(&q, &eps, &data, 1e-5).unwrap();
        assert_eq!(eval, eval_fd);
        for (i, (a, b)) in h.iter().zip(&h_fd).enumerate() {
            assert!(
                rel_err(*a, *b) < 1e-3 || (a - b).abs() < 1e-7,
                "param {i}: {a} vs {b}"
            );
        }
    }

    #[test]
    fn analytic_and_fd_steps_agree() {
        // 2 classes, 4 features: 10 weights, 20 variational parameters
        let data = gaussian_blobs(
            &[vec![1.0, 0.0, 0.5, -0.5], vec![-1.0, 0.5, 0.0, 0.5]],
            1.0,
            10,
            8,
        )
        .unwrap();
        let model = AffineSoftmax::new(4, 2);
        let part = ErrorPartition::fully_refined(2, losses(&[0.0, 1.0, 3.0, 0.0])).unwrap();
        let prior = PriorSpec::isotropic(10, 1.0).unwrap();
        let mut config = TrainConfig {
            learning_rate: 0.3,
            ..TrainConfig::default()
        };
        let obj = BoundObjective::new(&model, &part, &prior, 20, &config).unwrap();
        let start = GaussianPosterior::new(vec![0.2; 10], vec![-1.0; 10]).unwrap();

        let mut analytic = TrainState::new(start.clone(), 17);
        training_step(&mut analytic, &obj, &data, &config).unwrap();
        config.gradient = GradientMode::FiniteDifference;
        let mut numeric = TrainState::new(start, 17);
        training_step(&mut numeric, &obj, &data, &config).unwrap();
        for (a, b) in analytic
            .posterior
            .to_params()
            .iter()
            .zip(numeric.posterior.to_params())
        {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_state() {
        let (model, part, prior, data) = objective_fixture();
        let config = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let obj = BoundObjective::new(&model, &part, &prior, data.len() as u64, &config).unwrap();
        let start = GaussianPosterior::new(vec![0.3; 9], vec![-0.5; 9]).unwrap();
        let mut state = TrainState::new(start.clone(), 1);
        let diag = training_step(&mut state, &obj, &data, &config).unwrap();
        assert_eq!(state.posterior, start);
        let eval = diag.evaluation.unwrap();
        assert!(diag.grad_norm > 0.0);
        assert!(
            eval.f_star
                >= part
                    .losses()
                    .as_slice()
                    .iter()
                    .zip(&eval.risk)
                    .map(|(l, u)| l * u)
                    .sum::<f64>()
        );
    }

    #[test]
    fn boundary_policy() {
        let data = small_dataset();
        let coarse = ErrorPartition::correct_incorrect(3, losses(&[0.0, 1.0])).unwrap();
        let oracle = Oracle {
            classes: 3,
            dim: 2,
            labels: data.rows().map(|(x, y)| (x.to_vec(), y)).collect(),
        };
        let prior = PriorSpec::isotropic(1, 1.0).unwrap();
        let mut config = TrainConfig::default();
        let obj = BoundObjective::new(&oracle, &coarse, &prior, 10, &config).unwrap();
        let mut state = TrainState::new(GaussianPosterior::new(vec![0.0], vec![0.0]).unwrap(), 3);
        let diag = training_step(&mut state, &obj, &data, &config).unwrap();
        assert!(diag.evaluation.is_none());
        assert!(diag.warning.is_some());

        config.boundary = BoundaryPolicy::Smooth { alpha: 0.5 };
        let obj = BoundObjective::new(&oracle, &coarse, &prior, 10, &config).unwrap();
        let diag = training_step(&mut state, &obj, &data, &config).unwrap();
        let risk = diag.evaluation.unwrap().risk;
        assert!((risk[1] - 0.5 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_returns_initial_certificate() {
        let (model, part, _, data) = objective_fixture();
        let config = TrainConfig {
            epochs: 0,
            cert_samples: 5,
            ..TrainConfig::default()
        };
        let out = train(&model, &data, &part, &config).unwrap();
        assert_eq!(out.posterior, out.initial_posterior);
        assert_eq!(out.certificate, out.initial_certificate);
        assert!(out.history.is_empty());
        assert_eq!(out.certificate.m, data.len() as u64);
        assert_eq!(out.certificate.kl_qp, 0.0);
        assert!(revalidate_certificate(&out.certificate.to_json().unwrap()).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_valid() {
        let (model, part, _, data) = objective_fixture();
        let config = TrainConfig {
            epochs: 15,
            cert_samples: 5,
            seed: 21,
            batch_size: Some(10),
            ..TrainConfig::default()
        };
        let a = train(&model, &data, &part, &config).unwrap();
        let b = train(&model, &data, &part, &config).unwrap();
        assert_eq!(
            history_to_jsonl(&a.history).unwrap(),
            history_to_jsonl(&b.history).unwrap()
        );
        assert_eq!(
            a.certificate.to_json().unwrap(),
            b.certificate.to_json().unwrap()
        );
        assert_eq!(a.history.len(), 15);
        for record in &a.history {
            assert_eq!(record.steps, 3);
            let u = &record.last.as_ref().unwrap().risk;
            assert!(u.iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let c = train(&model, &data, &part, &TrainConfig { seed: 22, ..config }).unwrap();
        assert_ne!(
            history_to_jsonl(&a.history).unwrap(),
            history_to_jsonl(&c.history).unwrap()
        );
    }

    #[test]
    fn prior_ignores_bound_rows() {
        let (model, part, _, data) = objective_fixture();
        let config = TrainConfig {
            epochs: 2,
            prior: PriorPolicy::TrainedOnPriorSplit,
            prior_split: 0.5,
            prior_epochs: 20,
            cert_samples: 3,
            ..TrainConfig::default()
        };
        let clean = train(&model, &data, &part, &config).unwrap();
        assert_eq!(clean.prior.provenance, PriorProvenance::TrainedOnPriorSplit);
        assert_eq!(clean.certificate.m, 12);

        // overwrite every bound row with a sentinel
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..data.len() {
            let (x, y) = data.row(i);
            if clean.bound_rows.contains(&i) {
                features.push(vec![1e3, -1e3]);
                labels.push((y + 1) % 3);
            } else {
                features.push(x.to_vec());
                labels.push(y);
            }
        }
        let tainted = LabelledDataset::new(features, labels, 3).unwrap();
        let (prior, bound_rows) = fit_prior(&model, &tainted, &part, &config).unwrap();
        assert_eq!(prior, clean.prior);
        assert_eq!(bound_rows, clean.bound_rows);
    }

    #[test]
    fn config_json() {
        let c: TrainConfig = serde_json::from_str(
            r#"{"epochs": 3, "boundary": {"policy": "smooth", "alpha": 0.5}, "mode": "exact"}"#,
        )
        .unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.boundary, BoundaryPolicy::Smooth { alpha: 0.5 });
        assert_eq!(c.mode, ConstantMode::Exact);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
        assert!(TrainConfig {
            delta: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn reference_forward() {
        let p = reference_model_forward(&[0.0; 9], &[1.0, 2.0], 3).unwrap();
        assert_eq!(p.len(), 3);
        assert!(reference_model_forward(&[0.0; 8], &[1.0, 2.0], 3).is_err());
    }
}
