//! Bayesian identification of sparse plus low-rank (S+L) one-step-ahead
//! predictors for multivariate Gaussian time series.
//!
//! The predictor `ŷ(t|t-1) = S(z)y(t) + L(z)y(t)` is estimated by Gaussian
//! regression: the impulse responses of `S` and `L` get independent
//! Kronecker-structured priors (`Γ ⊗ K̃` and `Λ ⊗ I_m ⊗ K̃`) whose
//! hyperparameters are fitted by marginal likelihood. Zeros on the diagonal of
//! `Γ` remove manifest edges; the rank of `Λ` is the number of latent nodes.
//!
//! Pipeline: [`noise_arx`] → [`likelihood::estimate_ktilde_hyper`] →
//! [`hyperloop::select_rank`] → [`estimator::posterior_mean_sl`] →
//! [`metrics`].

// `!(x >= 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimator;
pub mod experiment;
pub mod hyperloop;
pub mod io;
pub mod kernel;
pub mod likelihood;
pub mod linalg;
pub mod metrics;
pub mod noise_arx;
pub mod regression;
pub mod sgp;
pub mod sim;

pub use error::{Error, Result};
