//! PAC-Bayes generalisation certificates for discretised error types.
//!
//! A (stochastic) classifier's behaviour on a sample is summarised by a risk
//! vector on the simplex: the fraction of probability mass landing in each
//! user-defined error type (for instance each cell of the confusion matrix).
//! With probability at least `1 - delta`, the kl divergence between the
//! empirical and true risk vectors is at most a budget `B`; from that single
//! budget this crate derives per-type intervals, a bound on any loss-weighted
//! total risk, and distance bounds. It also trains a Gaussian posterior over
//! a softmax classifier by minimising the total-risk bound directly.
//!
//! Modules:
//! - [`simplex`]: simplex points, kl, total risk, TV / Hellinger.
//! - [`constants`]: the bound constant, exact and Stirling forms.
//! - [`kl_inverse`]: the loss-weighted kl-inverse and its gradients.
//! - [`risk_bounds`]: certificate assembly and re-validation.
//! - [`training`]: gradient descent on the total-risk bound.
//! - [`verify`]: Monte Carlo and enumeration checks of the inequalities.

pub mod constants;
pub mod error;
pub mod kl_inverse;
pub mod num17;
pub mod risk_bounds;
pub mod simplex;
pub mod training;
pub mod verify;

pub use constants::ConstantMode;
pub use error::{Error, Result};
pub use kl_inverse::TiltedSolution;
pub use risk_bounds::{BoundCertificate, PacBayesInputs};
pub use simplex::{LossVector, SimplexVector};
