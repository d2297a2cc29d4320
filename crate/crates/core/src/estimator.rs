//! Posterior means of the predictor coefficients.
//!
//! With `V = Φ K Φᵀ + Σ ⊗ I_{N'}` and `c = V⁻¹ y`, the posterior mean of a
//! zero-mean Gaussian `θ` with covariance `K` is `K Φᵀ c`; for the split
//! prior `K = K_S + K_L` the two parts are `K_S Φᵀ c` and `K_L Φᵀ c`.
//!
//! The `mN' × mN'` system is never formed. Writing `Ψ = Q R` (thin QR, `Q`
//! with `p = min(N', mT)` orthonormal columns) the transformation
//! `I_m ⊗ [Q Q⊥]` block-diagonalizes `V` into a `mp × mp` part
//!
//! ```text
//! Ṽ_(i,i') = δ_ii' Σ_j γ_ij M_j + Λ_ii' M + Σ_ii' I_p,   M_j = R_j K̃ R_jᵀ,  M = Σ_j M_j
//! ```
//!
//! and `Σ ⊗ I` on the orthogonal complement, which is handled in closed
//! form. `Φᵀc` only sees the first part: block `i` equals `Rᵀ (Ṽ⁻¹ z)_i`
//! with `z_i = Qᵀ y_i`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::serde_mat;
use crate::kernel::{Kernel, KernelTilde, LowRankKernel, PriorKernel, SparseKernel};
use crate::linalg::{symmetrize, SpdFactor};
use crate::regression::{unstack_theta, weighted_sq_norm, Regressor, StackedData, ThetaLayout};

/// Data projected onto the column space of `Ψ`.
#[derive(Debug, Clone)]
pub struct ProjectedData {
    pub m: usize,
    pub t: usize,
    pub n_prime: usize,
    /// Dimension of the retained subspace.
    pub p: usize,
    /// `p × mT` with `Ψ = Q R`.
    pub r: DMatrix<f64>,
    /// `p × m`, column `i` is `Qᵀ y_i`.
    pub z: DMatrix<f64>,
    /// `m × m` Gram matrix of the components of `y` orthogonal to `range(Ψ)`.
    pub resid_gram: DMatrix<f64>,
}

impl ProjectedData {
    pub fn new(data: &StackedData, reg: &Regressor) -> Result<Self> {
        let (m, t) = (reg.m, reg.t);
        let n_prime = reg.n_prime();
        if data.m != m || data.n_prime != n_prime {
            return Err(Error::DimensionMismatch { expected: m * n_prime, got: data.y.len() });
        }
        let width = m * t;
        let y = data.unstack();
        if n_prime > width {
            let qr = reg.psi.clone().qr();
            let q = qr.q();
            let r = qr.r();
            let z = q.tr_mul(&y);
            let perp = &y - &q * &z;
            let resid_gram = perp.tr_mul(&perp);
            Ok(Self { m, t, n_prime, p: width, r, z, resid_gram })
        } else {
            Ok(Self {
                m,
                t,
                n_prime,
                p: n_prime,
                r: reg.psi.clone(),
                z: y,
                resid_gram: DMatrix::zeros(m, m),
            })
        }
    }

    /// `z` stacked component-major.
    pub fn z_stacked(&self) -> DVector<f64> {
        DVector::from_column_slice(self.z.as_slice())
    }
}

/// Projected kernel blocks `M_j = R_j K̃ R_jᵀ` for one `K̃`.
#[derive(Debug, Clone)]
pub struct GramBlocks {
    pub per_input: Vec<DMatrix<f64>>,
    pub total: DMatrix<f64>,
}

impl GramBlocks {
    pub fn new(proj: &ProjectedData, ktilde: &KernelTilde) -> Result<Self> {
        if ktilde.t != proj.t {
            return Err(Error::DimensionMismatch { expected: proj.t, got: ktilde.t });
        }
        let t = proj.t;
        let mut total = DMatrix::zeros(proj.p, proj.p);
        let per_input: Vec<DMatrix<f64>> = (0..proj.m)
            .map(|j| {
                let rj = proj.r.columns(j * t, t);
                let mut mj = rj * ktilde.matrix() * rj.transpose();
                symmetrize(&mut mj);
                total += &mj;
                mj
            })
            .collect();
        Ok(Self { per_input, total })
    }
}

/// Assembles `Ṽ` for hyperparameters `(γ, Λ)` and noise covariance `Σ`.
pub fn assemble_v(
    proj: &ProjectedData,
    grams: &GramBlocks,
    gamma: &[f64],
    lambda: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (m, p) = (proj.m, proj.p);
    let mut v = DMatrix::zeros(m * p, m * p);
    for i in 0..m {
        let mut diag_block = DMatrix::zeros(p, p);
        for (j, mj) in grams.per_input.iter().enumerate() {
            let g = gamma[i * m + j];
            if g != 0.0 {
                diag_block += mj * g;
            }
        }
        for ip in 0..m {
            let mut block = v.view_mut((i * p, ip * p), (p, p));
            if i == ip {
                block += &diag_block;
            }
            let l = lambda[(i, ip)];
            if l != 0.0 {
                block += &grams.total * l;
            }
            let s = sigma[(i, ip)];
            for d in 0..p {
                block[(d, d)] += s;
            }
        }
    }
    v
}

/// Solver diagnostics attached to an estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `‖Ṽc - z‖ / ‖z‖` of the reduced dual system.
    pub residual_norm: f64,
    /// Diagonal jitter added to `Ṽ` (0 if none was needed).
    pub jitter: f64,
}

/// Posterior means of the sparse and low-rank coefficient vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorEstimate {
    #[serde(with = "dvec")]
    pub theta_s: DVector<f64>,
    #[serde(with = "dvec")]
    pub theta_l: DVector<f64>,
    #[serde(flatten)]
    pub layout: ThetaLayout,
    #[serde(with = "serde_mat")]
    pub sigma: DMatrix<f64>,
    pub diagnostics: Diagnostics,
}

mod dvec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

impl PredictorEstimate {
    /// Estimate with only a full `θ` (the sparse slot holds it, low-rank is zero).
    pub fn unstructured(theta: DVector<f64>, layout: ThetaLayout, sigma: DMatrix<f64>) -> Self {
        let n = theta.len();
        Self { theta_s: theta, theta_l: DVector::zeros(n), layout, sigma, diagnostics: Diagnostics::default() }
    }

    pub fn theta(&self) -> DVector<f64> {
        &self.theta_s + &self.theta_l
    }

    /// `G_k = S_k + L_k`, `k = 1..T`.
    pub fn coefficients(&self) -> Vec<DMatrix<f64>> {
        unstack_theta(&self.theta(), self.layout).expect("layout matches by construction")
    }

    pub fn sparse_coefficients(&self) -> Vec<DMatrix<f64>> {
        unstack_theta(&self.theta_s, self.layout).expect("layout matches by construction")
    }

    pub fn lowrank_coefficients(&self) -> Vec<DMatrix<f64>> {
        unstack_theta(&self.theta_l, self.layout).expect("layout matches by construction")
    }
}

fn check_sigma(sigma: &DMatrix<f64>, m: usize) -> Result<()> {
    if sigma.shape() != (m, m) {
        return Err(Error::DimensionMismatch { expected: m, got: sigma.nrows() });
    }
    Ok(())
}

/// Result of solving the reduced dual system.
pub struct DualSolution {
    /// `Φᵀ c`, length `m²T`.
    pub phi_t_c: DVector<f64>,
    pub diagnostics: Diagnostics,
}

/// Solves `Ṽ c = z` and maps back to `Φᵀ c`.
pub fn solve_dual(
    proj: &ProjectedData,
    grams: &GramBlocks,
    gamma: &[f64],
    lambda: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> Result<DualSolution> {
    let v = assemble_v(proj, grams, gamma, lambda, sigma);
    let factor = SpdFactor::new(&v)?;
    let z = proj.z_stacked();
    let c = factor.solve(&z);
    let residual_norm = (&v * &c - &z).norm() / z.norm().max(f64::MIN_POSITIVE);
    let (m, p, width) = (proj.m, proj.p, proj.m * proj.t);
    let mut phi_t_c = DVector::zeros(m * width);
    for i in 0..m {
        let h = proj.r.tr_mul(&c.rows(i * p, p).into_owned());
        phi_t_c.rows_mut(i * width, width).copy_from(&h);
    }
    Ok(DualSolution { phi_t_c, diagnostics: Diagnostics { residual_norm, jitter: factor.jitter() } })
}

/// `K_S Φᵀc` and `K_L Φᵀc` for a prior in `diag(γ) ⊗ K̃ + Λ ⊗ I ⊗ K̃` form.
pub fn split_posterior(prior: &PriorKernel, phi_t_c: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let sparse = SparseKernel::from_prior(prior);
    let theta_s = sparse.matvec(phi_t_c)?;
    let theta_l = if prior.has_lowrank() {
        let low = PriorKernel { gamma: vec![0.0; prior.m * prior.m], ..prior.clone() };
        low.matvec(phi_t_c)?
    } else {
        DVector::zeros(phi_t_c.len())
    };
    Ok((theta_s, theta_l))
}

impl SparseKernel {
    fn from_prior(prior: &PriorKernel) -> SparseKernel {
        crate::kernel::build_sparse_kernel(prior.gamma.clone(), prior.ktilde.clone())
            .expect("prior γ validated on construction")
    }
}

/// `θ̂ = K Φᵀ (Φ K Φᵀ + Σ ⊗ I)⁻¹ y` for any structured prior.
pub fn posterior_mean_g<K: Kernel + ?Sized>(
    data: &StackedData,
    reg: &Regressor,
    kernel: &K,
    sigma: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let prior = kernel.to_prior();
    check_sigma(sigma, reg.m)?;
    let proj = ProjectedData::new(data, reg)?;
    let grams = GramBlocks::new(&proj, &prior.ktilde)?;
    let sol = solve_dual(&proj, &grams, &prior.gamma, &prior.lambda, sigma)?;
    prior.matvec(&sol.phi_t_c)
}

/// Joint posterior means `θ̂_s = K_S Φᵀ c`, `θ̂_l = K_L Φᵀ c`.
pub fn posterior_mean_sl(
    data: &StackedData,
    reg: &Regressor,
    ks: &SparseKernel,
    kl: &LowRankKernel,
    sigma: &DMatrix<f64>,
) -> Result<PredictorEstimate> {
    let prior = PriorKernel::sum(ks, kl)?;
    check_sigma(sigma, reg.m)?;
    let proj = ProjectedData::new(data, reg)?;
    let grams = GramBlocks::new(&proj, &prior.ktilde)?;
    posterior_mean_projected(&proj, &grams, &prior, sigma)
}

/// [`posterior_mean_sl`] on precomputed projections.
pub fn posterior_mean_projected(
    proj: &ProjectedData,
    grams: &GramBlocks,
    prior: &PriorKernel,
    sigma: &DMatrix<f64>,
) -> Result<PredictorEstimate> {
    let sol = solve_dual(proj, grams, &prior.gamma, &prior.lambda, sigma)?;
    let (theta_s, theta_l) = split_posterior(prior, &sol.phi_t_c)?;
    Ok(PredictorEstimate {
        theta_s,
        theta_l,
        layout: ThetaLayout::new(proj.m, proj.t),
        sigma: sigma.clone(),
        diagnostics: sol.diagnostics,
    })
}

/// Range tolerance for penalties on singular kernels.
const RANGE_TOL: f64 = 1e-9;

/// `‖y - Φ(θ_s+θ_l)‖²_{Σ⁻¹⊗I} + ‖θ_s‖²_{K_S⁻¹} + ‖θ_l‖²_{K_L⁻¹}`, with
/// pseudo-inverse norms on singular kernels.
///
/// Fails with [`Error::OutsideKernelRange`] when `θ_s` or `θ_l` has a
/// component outside the range of its kernel.
pub fn tikhonov_objective(
    theta_s: &DVector<f64>,
    theta_l: &DVector<f64>,
    data: &StackedData,
    reg: &Regressor,
    ks: &SparseKernel,
    kl: &LowRankKernel,
    sigma: &DMatrix<f64>,
) -> Result<f64> {
    let m = reg.m;
    let t = reg.t;
    check_sigma(sigma, m)?;
    let sigma_inv = sigma
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("Σ is singular".into()))?;
    let pred = reg.predict(&(theta_s + theta_l))?;
    let fit = weighted_sq_norm(&(&data.y - pred), &sigma_inv, data.n_prime);

    let chol = ks.ktilde.cholesky();
    let scale = 1.0 + theta_s.norm() + theta_l.norm();

    let mut sparse_pen = 0.0;
    for (b, &g) in ks.gamma.iter().enumerate() {
        let blk = theta_s.rows(b * t, t).into_owned();
        if g == 0.0 {
            let nrm = blk.norm();
            if nrm > RANGE_TOL * scale {
                return Err(Error::OutsideKernelRange { residual: nrm });
            }
        } else {
            let w = chol.solve_lower_triangular(&blk).expect("K̃ factor nonsingular");
            sparse_pen += w.norm_squared() / g;
        }
    }

    // Λ⁺ and the null space of Λ.
    let eig = kl.lambda().clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
    let cut = 1e-12 * max_ev.max(f64::MIN_POSITIVE);
    let mut pinv = DMatrix::zeros(m, m);
    let mut null_cols = Vec::new();
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        if ev > cut {
            pinv += v * v.transpose() / ev;
        } else {
            null_cols.push(v.into_owned());
        }
    }
    let mut lowrank_pen = 0.0;
    for j in 0..m {
        let x = DMatrix::from_fn(t, m, |k, i| theta_l[(i * m + j) * t + k]);
        for nv in &null_cols {
            let leak = (&x * nv).norm();
            if leak > RANGE_TOL * scale {
                return Err(Error::OutsideKernelRange { residual: leak });
            }
        }
        let y = chol.solve_lower_triangular(&x).expect("K̃ factor nonsingular");
        lowrank_pen += (&y * &pinv).component_mul(&y).sum();
    }
    Ok(fit + sparse_pen + lowrank_pen)
}
