//! Random sparse plus low-rank ground-truth models and data simulation.
//!
//! A ground-truth model is the pair
//!
//! ```text
//! y(t) = F x(t) + S(z) y(t) + v(t)
//! x(t) = H(z) y(t) + w(t)
//! ```
//!
//! with finite impulse responses `S_1..S_T`, `H_1..H_T`. Eliminating `x`
//! gives `y(t) = Σ_k (S_k + F H_k) y(t-k) + e(t)` with
//! `e ~ N(0, Σ_v + F Σ_w Fᵀ)`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::PredictorEstimate;
use crate::regression::{stack_theta, ThetaLayout};
use crate::io::serde_mat;
use crate::linalg::companion_spectral_radius;

/// Target companion spectral radius after rescaling.
pub const TARGET_SPECTRAL_RADIUS: f64 = 0.95;
/// Multiplicative shrink applied per rescaling retry.
pub const RESCALE_FACTOR: f64 = 0.9;
/// Upper bound on rescaling retries before a draw is declared degenerate.
pub const MAX_RESCALES: usize = 400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthModel {
    pub m: usize,
    pub n: usize,
    #[serde(rename = "T_true")]
    pub t_true: usize,
    #[serde(rename = "S_coeffs", with = "serde_mat::seq")]
    pub s_coeffs: Vec<DMatrix<f64>>,
    #[serde(rename = "F", with = "serde_mat")]
    pub f: DMatrix<f64>,
    #[serde(rename = "H_coeffs", with = "serde_mat::seq")]
    pub h_coeffs: Vec<DMatrix<f64>>,
    #[serde(rename = "Sigma_v", with = "serde_mat")]
    pub sigma_v: DMatrix<f64>,
    #[serde(rename = "Sigma_w", with = "serde_mat")]
    pub sigma_w: DMatrix<f64>,
    /// Zero-based `(i, j)` pairs: `y_j` enters the prediction of `y_i`.
    pub sparsity_support: BTreeSet<(usize, usize)>,
    pub seed: u64,
}

impl GroundTruthModel {
    /// Innovation covariance `Σ = Σ_v + F Σ_w Fᵀ`.
    pub fn innovation_covariance(&self) -> DMatrix<f64> {
        &self.sigma_v + &self.f * &self.sigma_w * self.f.transpose()
    }

    /// Low-rank coefficients `L_k = F H_k`.
    pub fn l_coeffs(&self) -> Vec<DMatrix<f64>> {
        self.h_coeffs.iter().map(|h| &self.f * h).collect()
    }

    /// Full predictor coefficients `G_k = S_k + F H_k`.
    pub fn predictor_coeffs(&self) -> Vec<DMatrix<f64>> {
        self.s_coeffs
            .iter()
            .zip(self.l_coeffs())
            .map(|(s, l)| s + l)
            .collect()
    }

    pub fn spectral_radius(&self) -> f64 {
        companion_spectral_radius(&self.predictor_coeffs())
    }
}

/// `N` consecutive samples of an `m`-variate series; row `t` is `y(t+1)ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub values: DMatrix<f64>,
    pub seed: Option<u64>,
}

impl TimeSeries {
    pub fn new(values: DMatrix<f64>, seed: Option<u64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidArgument("time series must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("time series contains non-finite values".into()));
        }
        Ok(Self { values, seed })
    }

    pub fn m(&self) -> usize {
        self.values.ncols()
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    /// `y(t)` for zero-based `t`.
    pub fn at(&self, t: usize) -> DVector<f64> {
        self.values.row(t).transpose()
    }

    /// Column mean over all samples.
    pub fn mean(&self) -> DVector<f64> {
        self.values.row_mean().transpose()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_spd(rng: &mut ChaCha8Rng, dim: usize) -> DMatrix<f64> {
    let b = DMatrix::from_fn(dim, dim, |_, _| normal(rng));
    let diag = DVector::from_fn(dim, |_, _| rng.random_range(0.5..1.5));
    DMatrix::from_diagonal(&diag) + 0.2 * &b * b.transpose() / dim.max(1) as f64
}

/// Draws a random stable S+L ground-truth model.
///
/// `nnz_s` manifest edges are placed off the diagonal first, uniformly
/// without replacement; only when `nnz_s > m(m-1)` are diagonal entries used.
/// Lag-`k` coefficients of `S` and `H` are standard normal times `decay^k`.
/// `S` and `H` are then shrunk by [`RESCALE_FACTOR`] until the companion
/// spectral radius of `S_k + F H_k` is at most [`TARGET_SPECTRAL_RADIUS`].
pub fn generate_sl_model(
    m: usize,
    n: usize,
    nnz_s: usize,
    t_true: usize,
    decay: f64,
    seed: u64,
) -> Result<GroundTruthModel> {
    if m == 0 {
        return Err(Error::InvalidArgument("m must be positive".into()));
    }
    if n >= m {
        return Err(Error::InvalidArgument(format!("latent dimension n={n} must be below m={m}")));
    }
    if nnz_s > m * m {
        return Err(Error::InvalidArgument(format!("nnz_s={nnz_s} exceeds m²={}", m * m)));
    }
    if t_true == 0 {
        return Err(Error::InvalidArgument("T_true must be positive".into()));
    }
    if !(decay > 0.0 && decay < 1.0) {
        return Err(Error::InvalidArgument(format!("decay {decay} not in (0,1)")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut off: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    off.shuffle(&mut rng);
    let mut diag: Vec<(usize, usize)> = (0..m).map(|i| (i, i)).collect();
    diag.shuffle(&mut rng);
    let support: BTreeSet<(usize, usize)> = off.into_iter().chain(diag).take(nnz_s).collect();

    let mut s_coeffs = Vec::with_capacity(t_true);
    let mut h_coeffs = Vec::with_capacity(t_true);
    for k in 1..=t_true {
        let scale = decay.powi(k as i32);
        let mut s = DMatrix::zeros(m, m);
        for &(i, j) in &support {
            s[(i, j)] = normal(&mut rng) * scale;
        }
        s_coeffs.push(s);
        h_coeffs.push(DMatrix::from_fn(n, m, |_, _| normal(&mut rng) * scale));
    }
    let f = DMatrix::from_fn(m, n, |_, _| normal(&mut rng));
    let sigma_v = random_spd(&mut rng, m);
    let sigma_w = random_spd(&mut rng, n);

    let mut model = GroundTruthModel {
        m,
        n,
        t_true,
        s_coeffs,
        f,
        h_coeffs,
        sigma_v,
        sigma_w,
        sparsity_support: support,
        seed,
    };

    let mut retries = 0;
    loop {
        let rho = model.spectral_radius();
        if !rho.is_finite() {
            return Err(Error::UnstableModel { retries });
        }
        if rho <= TARGET_SPECTRAL_RADIUS {
            break;
        }
        if retries == MAX_RESCALES {
            return Err(Error::UnstableModel { retries });
        }
        for s in model.s_coeffs.iter_mut() {
            *s *= RESCALE_FACTOR;
        }
        for h in model.h_coeffs.iter_mut() {
            *h *= RESCALE_FACTOR;
        }
        retries += 1;
    }
    Ok(model)
}

/// Default burn-in length, `10·T_true`.
pub fn default_burn_in(model: &GroundTruthModel) -> usize {
    10 * model.t_true
}

/// Simulates `N` samples of the model after discarding `burn_in` samples.
pub fn simulate(model: &GroundTruthModel, n_samples: usize, seed: u64, burn_in: usize) -> Result<TimeSeries> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("N must be positive".into()));
    }
    if burn_in < model.t_true {
        return Err(Error::InvalidArgument(format!(
            "burn_in {burn_in} shorter than T_true {}",
            model.t_true
        )));
    }
    let m = model.m;
    let sigma = model.innovation_covariance();
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?
        .l();
    let coeffs = model.predictor_coeffs();
    let lags = coeffs.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = burn_in + n_samples;
    // history[lags + t] holds y(t); leading rows are zero initial conditions.
    let mut history = DMatrix::<f64>::zeros(lags + total, m);
    for t in 0..total {
        let z = DVector::from_fn(m, |_, _| normal(&mut rng));
        let mut y = &chol * z;
        for (k, g) in coeffs.iter().enumerate() {
            let past = history.row(lags + t - k - 1).transpose();
            y += g * past;
        }
        if y.iter().any(|v| !v.is_finite() || v.abs() > 1e150) {
            return Err(Error::Numerical(format!("simulation diverged at step {t}")));
        }
        history.row_mut(lags + t).copy_from(&y.transpose());
    }
    let values = history.rows(lags + burn_in, n_samples).into_owned();
    TimeSeries::new(values, Some(seed))
}

/// The exact one-step predictor of the model, laid out with `T = T_true`.
pub fn true_predictor(model: &GroundTruthModel) -> PredictorEstimate {
    let theta_s = stack_theta(&model.s_coeffs).expect("non-empty lag list");
    let theta_l = stack_theta(&model.l_coeffs()).expect("non-empty lag list");
    PredictorEstimate {
        theta_s,
        theta_l,
        layout: ThetaLayout::new(model.m, model.t_true),
        sigma: model.innovation_covariance(),
        diagnostics: Default::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regression::unstack_theta;
    use approx::assert_relative_eq;

    #[test]
    fn experiment_one_shape() {
        let model = generate_sl_model(6, 1, 4, 20, 0.8, 1).unwrap();
        assert_eq!(model.sparsity_support.len(), 4);
        assert_eq!(model.f.shape(), (6, 1));
        assert_eq!(model.h_coeffs[0].shape(), (1, 6));
        assert!(model.sparsity_support.iter().all(|&(i, j)| i != j));
        assert!(model.spectral_radius() <= TARGET_SPECTRAL_RADIUS + 1e-12);
    }

    #[test]
    fn support_matches_nonzero_pattern() {
        let model = generate_sl_model(5, 2, 7, 6, 0.7, 9).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let nonzero = model.s_coeffs.iter().any(|s| s[(i, j)] != 0.0);
                assert_eq!(nonzero, model.sparsity_support.contains(&(i, j)));
            }
        }
    }

    #[test]
    fn no_sparse_part_gives_factor_model() {
        let model = generate_sl_model(2, 1, 0, 5, 0.8, 3).unwrap();
        assert!(model.s_coeffs.iter().all(|s| s.iter().all(|&v| v == 0.0)));
        assert!(model.sparsity_support.is_empty());
    }

    #[test]
    fn dense_support_uses_diagonal_last() {
        let model = generate_sl_model(3, 0, 9, 3, 0.5, 4).unwrap();
        assert_eq!(model.sparsity_support.len(), 9);
        let model = generate_sl_model(3, 0, 6, 3, 0.5, 4).unwrap();
        assert!(model.sparsity_support.iter().all(|&(i, j)| i != j));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_sl_model(6, 1, 4, 20, 0.8, 42).unwrap();
        let b = generate_sl_model(6, 1, 4, 20, 0.8, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_sl_model(3, 3, 1, 5, 0.8, 0).is_err());
        assert!(generate_sl_model(3, 1, 10, 5, 0.8, 0).is_err());
        assert!(generate_sl_model(3, 1, 1, 5, 1.0, 0).is_err());
        assert!(generate_sl_model(0, 0, 0, 5, 0.5, 0).is_err());
    }

    #[test]
    fn sigma_reduces_to_sigma_v_without_latents() {
        let mut model = generate_sl_model(3, 1, 2, 4, 0.8, 5).unwrap();
        model.f = DMatrix::zeros(3, 1);
        model.sigma_v = DMatrix::identity(3, 3);
        assert_eq!(model.innovation_covariance(), DMatrix::identity(3, 3));
    }

    #[test]
    fn simulation_is_reproducible() {
        let model = generate_sl_model(4, 1, 3, 8, 0.8, 2).unwrap();
        let a = simulate(&model, 100, 11, 80).unwrap();
        let b = simulate(&model, 100, 11, 80).unwrap();
        assert_eq!(a.values, b.values);
        let c = simulate(&model, 100, 12, 80).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn white_noise_sample_covariance_converges() {
        let mut model = generate_sl_model(3, 1, 2, 4, 0.8, 6).unwrap();
        for s in model.s_coeffs.iter_mut() {
            s.fill(0.0);
        }
        for h in model.h_coeffs.iter_mut() {
            h.fill(0.0);
        }
        let sigma = model.innovation_covariance();
        let ts = simulate(&model, 100_000, 1, 40).unwrap();
        let centered = &ts.values;
        let cov = centered.transpose() * centered / ts.len() as f64;
        assert!((&cov - &sigma).norm() / sigma.norm() < 0.05);
    }

    #[test]
    fn burn_in_must_cover_impulse_response() {
        let model = generate_sl_model(3, 1, 2, 10, 0.8, 6).unwrap();
        assert!(simulate(&model, 10, 0, 5).is_err());
        assert_relative_eq!(default_burn_in(&model) as f64, 100.0);
    }

    #[test]
    fn true_predictor_round_trip() {
        let model = generate_sl_model(4, 1, 3, 6, 0.8, 21).unwrap();
        let pred = true_predictor(&model);
        let g = unstack_theta(&pred.theta(), pred.layout).unwrap();
        for (k, gk) in g.iter().enumerate() {
            assert_eq!(gk, &(&model.s_coeffs[k] + &model.f * &model.h_coeffs[k]));
        }
        let s = unstack_theta(&pred.theta_s, pred.layout).unwrap();
        assert_eq!(s, model.s_coeffs);
    }

    #[test]
    fn no_latent_loading_gives_zero_lowrank_part() {
        let mut model = generate_sl_model(3, 1, 2, 4, 0.8, 22).unwrap();
        model.f.fill(0.0);
        assert!(true_predictor(&model).theta_l.iter().all(|&v| v == 0.0));
    }
}
