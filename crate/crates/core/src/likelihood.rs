//! Negative log marginal likelihood of the stacked data and its gradient in
//! the kernel hyperparameters.
//!
//! ```text
//! ℓ(ξ) = ½ log det V + ½ yᵀ V⁻¹ y,    V = Φ (K_S + K_L) Φᵀ + Σ ⊗ I_{N'}
//! ```
//!
//! (the `N'm/2 · log 2π` constant is dropped). `V` is affine in
//! `ξ = (γ_1..γ_{m²}, α, β_1..β_r)` with structure matrices
//!
//! ```text
//! B_{γ_ij} = e_i e_iᵀ ⊗ Ψ_j K̃ Ψ_jᵀ,   B_α = (I - UUᵀ) ⊗ Ψ(I⊗K̃)Ψᵀ,   B_{β_q} = u_q u_qᵀ ⊗ Ψ(I⊗K̃)Ψᵀ
//! ```
//!
//! and `∂ℓ/∂ξ_p = ½ tr(V⁻¹B_p) - ½ (V⁻¹y)ᵀ B_p (V⁻¹y)`. Everything is
//! evaluated on the projected system of [`crate::estimator`].

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{assemble_v, posterior_mean_projected, GramBlocks, PredictorEstimate, ProjectedData};
use crate::io::serde_mat;
use crate::kernel::{
    build_lowrank_kernel, build_sparse_kernel, check_orthonormal, lambda_matrix, tc_kernel, KernelTilde,
    LowRankKernel, PriorKernel, SparseKernel,
};
use crate::linalg::{frob_dot, SpdFactor};
use crate::regression::{Regressor, StackedData};
use crate::sgp::{sgp_minimize, Objective, SgpOptions, SgpResult};

/// γ entries below this fraction of `max γ` are set to exactly zero.
pub const GAMMA_TRUNCATION: f64 = 1e-8;

/// Hyperparameters `ξ = (γ, α, β)` plus the fixed `U` and `K̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperState {
    pub gamma: Vec<f64>,
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub u: DMatrix<f64>,
    pub ktilde: KernelTilde,
}

impl HyperState {
    pub fn new(gamma: Vec<f64>, alpha: f64, beta: Vec<f64>, u: DMatrix<f64>, ktilde: KernelTilde) -> Result<Self> {
        let m = u.nrows();
        if gamma.len() != m * m {
            return Err(Error::DimensionMismatch { expected: m * m, got: gamma.len() });
        }
        if beta.len() != u.ncols() {
            return Err(Error::DimensionMismatch { expected: u.ncols(), got: beta.len() });
        }
        if gamma.iter().chain(&beta).chain(std::iter::once(&alpha)).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("hyperparameters must be finite and nonnegative".into()));
        }
        check_orthonormal(&u)?;
        Ok(Self { gamma, alpha, beta, u, ktilde })
    }

    /// Starting point: γ = α = β = 1/(m·T·mean diag K̃).
    pub fn initial(m: usize, u: DMatrix<f64>, ktilde: KernelTilde) -> Result<Self> {
        let s = initial_scale(m, &ktilde);
        let r = u.ncols();
        Self::new(vec![s; m * m], s, vec![s; r], u, ktilde)
    }

    pub fn m(&self) -> usize {
        self.u.nrows()
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    /// `(γ_1..γ_{m²}, α, β_1..β_r)`.
    pub fn xi(&self) -> Vec<f64> {
        let mut xi = self.gamma.clone();
        xi.push(self.alpha);
        xi.extend_from_slice(&self.beta);
        xi
    }

    pub fn with_xi(&self, xi: &[f64]) -> Result<Self> {
        let mm = self.gamma.len();
        if xi.len() != mm + 1 + self.rank() {
            return Err(Error::DimensionMismatch { expected: mm + 1 + self.rank(), got: xi.len() });
        }
        Ok(Self {
            gamma: xi[..mm].to_vec(),
            alpha: xi[mm],
            beta: xi[mm + 1..].to_vec(),
            u: self.u.clone(),
            ktilde: self.ktilde.clone(),
        })
    }

    pub fn lambda(&self) -> DMatrix<f64> {
        lambda_matrix(self.alpha, &self.beta, &self.u)
    }

    pub fn sparse_kernel(&self) -> Result<SparseKernel> {
        build_sparse_kernel(self.gamma.clone(), self.ktilde.clone())
    }

    pub fn lowrank_kernel(&self) -> Result<LowRankKernel> {
        build_lowrank_kernel(self.alpha, self.beta.clone(), self.u.clone(), self.ktilde.clone())
    }

    pub fn prior(&self) -> PriorKernel {
        PriorKernel { m: self.m(), ktilde: self.ktilde.clone(), gamma: self.gamma.clone(), lambda: self.lambda() }
    }

    /// Zeroes γ entries below [`GAMMA_TRUNCATION`]`· max γ`.
    pub fn truncate_gamma(&mut self) {
        let max = self.gamma.iter().copied().fold(0.0, f64::max);
        for g in self.gamma.iter_mut() {
            if *g < GAMMA_TRUNCATION * max {
                *g = 0.0;
            }
        }
    }
}

/// `1/(m·T·mean diag K̃)`.
pub fn initial_scale(m: usize, ktilde: &KernelTilde) -> f64 {
    let mean_diag = ktilde.matrix().diagonal().mean();
    1.0 / (m as f64 * ktilde.t as f64 * mean_diag)
}

/// JSON form `{c, lambda, gamma, alpha, beta, U}` with `U` column-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperFile {
    pub c: f64,
    pub lambda: f64,
    #[serde(rename = "T")]
    pub t: usize,
    pub gamma: Vec<f64>,
    pub alpha: f64,
    pub beta: Vec<f64>,
    #[serde(rename = "U", with = "serde_mat::col_major")]
    pub u: DMatrix<f64>,
}

impl From<&HyperState> for HyperFile {
    fn from(h: &HyperState) -> Self {
        Self {
            c: h.ktilde.c,
            lambda: h.ktilde.lambda,
            t: h.ktilde.t,
            gamma: h.gamma.clone(),
            alpha: h.alpha,
            beta: h.beta.clone(),
            u: h.u.clone(),
        }
    }
}

impl TryFrom<HyperFile> for HyperState {
    type Error = Error;

    fn try_from(f: HyperFile) -> Result<Self> {
        let kt = tc_kernel(f.c, f.lambda, f.t)?;
        HyperState::new(f.gamma, f.alpha, f.beta, f.u, kt)
    }
}

/// Value and gradient of `ℓ` at one hyperparameter point.
#[derive(Debug, Clone)]
pub struct MarglikEval {
    pub value: f64,
    /// `∂ℓ/∂ξ` ordered like [`HyperState::xi`].
    pub gradient: Vec<f64>,
    /// `½ tr(V⁻¹B_p) ≥ 0`, the positive part of the gradient.
    pub positive_part: Vec<f64>,
}

/// Precomputed projections for repeated evaluations of `ℓ` with fixed
/// data, `Σ` and `K̃`.
#[derive(Debug, Clone)]
pub struct MarglikWorkspace {
    pub proj: ProjectedData,
    pub grams: GramBlocks,
    pub sigma: DMatrix<f64>,
    pub ktilde: KernelTilde,
    /// ½(N'-p) log det Σ + ½ ⟨Σ⁻¹, y⊥ᵀy⊥⟩, the part of ℓ outside range(Ψ).
    orth_part: f64,
}

impl MarglikWorkspace {
    pub fn new(data: &StackedData, reg: &Regressor, ktilde: &KernelTilde, sigma: &DMatrix<f64>) -> Result<Self> {
        Self::from_projected(ProjectedData::new(data, reg)?, ktilde, sigma)
    }

    pub fn from_projected(proj: ProjectedData, ktilde: &KernelTilde, sigma: &DMatrix<f64>) -> Result<Self> {
        if sigma.shape() != (proj.m, proj.m) {
            return Err(Error::DimensionMismatch { expected: proj.m, got: sigma.nrows() });
        }
        let grams = GramBlocks::new(&proj, ktilde)?;
        let orth_part = orthogonal_part(&proj, sigma)?;
        Ok(Self { proj, grams, sigma: sigma.clone(), ktilde: ktilde.clone(), orth_part })
    }

    pub fn m(&self) -> usize {
        self.proj.m
    }

    fn v_matrix(&self, gamma: &[f64], lambda: &DMatrix<f64>) -> DMatrix<f64> {
        assemble_v(&self.proj, &self.grams, gamma, lambda, &self.sigma)
    }

    fn check(&self, hyper: &HyperState) -> Result<()> {
        if hyper.m() != self.m() {
            return Err(Error::DimensionMismatch { expected: self.m(), got: hyper.m() });
        }
        if !hyper.ktilde.same_as(&self.ktilde) {
            return Err(Error::InvalidArgument("hyperparameters use a different K̃ than the workspace".into()));
        }
        Ok(())
    }

    /// `ℓ` for explicit `(γ, Λ)`.
    pub fn value_at(&self, gamma: &[f64], lambda: &DMatrix<f64>) -> Result<f64> {
        let v = self.v_matrix(gamma, lambda);
        let factor = SpdFactor::new(&v).map_err(|e| annotate(e, gamma, lambda))?;
        let z = self.proj.z_stacked();
        let quad = z.dot(&factor.solve(&z));
        Ok(0.5 * (factor.log_det() + quad) + self.orth_part)
    }

    pub fn value(&self, hyper: &HyperState) -> Result<f64> {
        self.check(hyper)?;
        self.value_at(&hyper.gamma, &hyper.lambda())
    }

    pub fn evaluate(&self, hyper: &HyperState) -> Result<MarglikEval> {
        self.check(hyper)?;
        let (m, p) = (self.proj.m, self.proj.p);
        let lambda = hyper.lambda();
        let v = self.v_matrix(&hyper.gamma, &lambda);
        let factor = SpdFactor::new(&v).map_err(|e| annotate(e, &hyper.gamma, &lambda))?;
        let z = self.proj.z_stacked();
        let a = factor.solve(&z);
        let value = 0.5 * (factor.log_det() + z.dot(&a)) + self.orth_part;
        let vinv = factor.inverse();

        let a_blocks: Vec<DVector<f64>> = (0..m).map(|i| a.rows(i * p, p).into_owned()).collect();
        let mut gradient = Vec::with_capacity(m * m + 1 + hyper.rank());
        let mut positive = Vec::with_capacity(gradient.capacity());
        for i in 0..m {
            let pii = vinv.view((i * p, i * p), (p, p));
            for mj in &self.grams.per_input {
                let tr = frob_dot(&pii, mj);
                let quad = a_blocks[i].dot(&(mj * &a_blocks[i]));
                gradient.push(0.5 * (tr - quad));
                positive.push(0.5 * tr);
            }
        }

        // Π_ii' = ⟨[V⁻¹]_ii', M⟩ and Q_ii' = a_iᵀ M a_i' drive every Λ direction.
        let mt = &self.grams.total;
        let ma: Vec<DVector<f64>> = a_blocks.iter().map(|ai| mt * ai).collect();
        let mut pi = DMatrix::zeros(m, m);
        let mut qm = DMatrix::zeros(m, m);
        for i in 0..m {
            for ip in i..m {
                let t = frob_dot(&vinv.view((i * p, ip * p), (p, p)), mt);
                let q = a_blocks[i].dot(&ma[ip]);
                pi[(i, ip)] = t;
                pi[(ip, i)] = t;
                qm[(i, ip)] = q;
                qm[(ip, i)] = q;
            }
        }
        let u = &hyper.u;
        let c_alpha = DMatrix::<f64>::identity(m, m) - u * u.transpose();
        let tr_a = frob_dot(&c_alpha, &pi);
        gradient.push(0.5 * (tr_a - frob_dot(&c_alpha, &qm)));
        positive.push(0.5 * tr_a);
        for q in 0..hyper.rank() {
            let uq = u.column(q);
            let tr_b = uq.dot(&(&pi * uq));
            gradient.push(0.5 * (tr_b - uq.dot(&(&qm * uq))));
            positive.push(0.5 * tr_b);
        }
        Ok(MarglikEval { value, gradient, positive_part: positive })
    }

    /// Projected structure matrix `B̃_p` for coordinate `p` of `ξ`.
    pub fn structure_matrix(&self, hyper: &HyperState, p_index: usize) -> DMatrix<f64> {
        let m = self.m();
        let mm = m * m;
        let mut gamma = vec![0.0; mm];
        let lambda = if p_index < mm {
            gamma[p_index] = 1.0;
            DMatrix::zeros(m, m)
        } else if p_index == mm {
            lambda_matrix(1.0, &vec![0.0; hyper.rank()], &hyper.u)
        } else {
            let mut beta = vec![0.0; hyper.rank()];
            beta[p_index - mm - 1] = 1.0;
            lambda_matrix(0.0, &beta, &hyper.u)
        };
        assemble_v(&self.proj, &self.grams, &gamma, &lambda, &DMatrix::zeros(m, m))
    }

    /// Projected `V` (the `Σ⊗I` complement is not included).
    pub fn projected_v(&self, hyper: &HyperState) -> DMatrix<f64> {
        self.v_matrix(&hyper.gamma, &hyper.lambda())
    }

    pub fn posterior(&self, hyper: &HyperState) -> Result<PredictorEstimate> {
        self.check(hyper)?;
        posterior_mean_projected(&self.proj, &self.grams, &hyper.prior(), &self.sigma)
    }

    /// Minimizes `ℓ` over `ξ ≥ 0` with `U` and `K̃` held fixed, starting
    /// from `start`. γ entries are truncated after convergence.
    pub fn minimize(&self, start: &HyperState, opts: &SgpOptions) -> Result<HyperFit> {
        self.check(start)?;
        let scale = initial_scale(self.m(), &self.ktilde);
        let obj = MarglikObjective { ws: self, template: start, scale, last_positive: RefCell::new(None) };
        let x0: Vec<f64> = start.xi().iter().map(|v| v / scale).collect();
        let result = sgp_minimize(&obj, &x0, opts)?;
        let xi: Vec<f64> = result.x.iter().map(|v| v * scale).collect();
        let mut hyper = start.with_xi(&xi)?;
        hyper.truncate_gamma();
        let value = self.value(&hyper)?;
        Ok(HyperFit { hyper, value, sgp: result })
    }
}

fn annotate(e: Error, gamma: &[f64], lambda: &DMatrix<f64>) -> Error {
    match e {
        Error::NotPositiveDefinite(msg) => Error::NotPositiveDefinite(format!(
            "{msg}; γ range [{:.3e}, {:.3e}], Λ diagonal {:?}",
            gamma.iter().copied().fold(f64::INFINITY, f64::min),
            gamma.iter().copied().fold(0.0, f64::max),
            lambda.diagonal().as_slice()
        )),
        other => other,
    }
}

fn orthogonal_part(proj: &ProjectedData, sigma: &DMatrix<f64>) -> Result<f64> {
    let extra = proj.n_prime - proj.p;
    if extra == 0 && proj.resid_gram.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Σ".into()))?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let sigma_inv = chol.inverse();
    Ok(0.5 * extra as f64 * log_det + 0.5 * frob_dot(&sigma_inv, &proj.resid_gram))
}

/// Outcome of one hyperparameter minimization.
#[derive(Debug, Clone)]
pub struct HyperFit {
    pub hyper: HyperState,
    /// `ℓ` re-evaluated at the (γ-truncated) returned point.
    pub value: f64,
    pub sgp: SgpResult,
}

/// `ℓ` in normalized coordinates `x = ξ / s`, with split-gradient scaling
/// `D_p = x_p / pos_p(x)` (pos_p the positive part of `∂ℓ/∂x_p`).
struct MarglikObjective<'a> {
    ws: &'a MarglikWorkspace,
    template: &'a HyperState,
    scale: f64,
    // positive part from the latest gradient evaluation, keyed by x
    last_positive: RefCell<Option<(Vec<f64>, Vec<f64>)>>,
}

impl MarglikObjective<'_> {
    fn hyper(&self, x: &[f64]) -> Result<HyperState> {
        let xi: Vec<f64> = x.iter().map(|v| v * self.scale).collect();
        self.template.with_xi(&xi)
    }
}

impl Objective for MarglikObjective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        self.ws.value(&self.hyper(x)?)
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let ev = self.ws.evaluate(&self.hyper(x)?)?;
        *self.last_positive.borrow_mut() = Some((x.to_vec(), ev.positive_part));
        Ok((ev.value, ev.gradient.iter().map(|g| g * self.scale).collect()))
    }

    fn scaling(&self, x: &[f64], _grad: &[f64]) -> Option<Vec<f64>> {
        let cached = self.last_positive.borrow().as_ref().filter(|(cx, _)| cx == x).map(|(_, p)| p.clone());
        let positive = match cached {
            Some(p) => p,
            None => self.ws.evaluate(&self.hyper(x).ok()?).ok()?.positive_part,
        };
        let mean = x.iter().sum::<f64>() / x.len().max(1) as f64;
        let floor = 1e-3 * mean.max(1e-12);
        Some(
            x.iter()
                .zip(&positive)
                .map(|(&xi, &pos)| xi.max(floor) / (pos * self.scale).max(f64::MIN_POSITIVE))
                .collect(),
        )
    }
}

/// `ℓ(y, Γ, Λ)` for one hyperparameter point.
pub fn neg_log_marglik(data: &StackedData, reg: &Regressor, hyper: &HyperState, sigma: &DMatrix<f64>) -> Result<f64> {
    MarglikWorkspace::new(data, reg, &hyper.ktilde, sigma)?.value(hyper)
}

/// `∂ℓ/∂ξ`, ordered like [`HyperState::xi`].
pub fn marglik_gradient(
    data: &StackedData,
    reg: &Regressor,
    hyper: &HyperState,
    sigma: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    Ok(MarglikWorkspace::new(data, reg, &hyper.ktilde, sigma)?.evaluate(hyper)?.gradient)
}

/// Decay rates searched for `K̃`.
pub fn lambda_grid() -> Vec<f64> {
    (0..14).map(|k| 0.30 + 0.05 * k as f64).collect()
}

/// Scale bounds for the `c` search.
pub const C_MIN: f64 = 1e-8;
pub const C_MAX: f64 = 1e4;
const C_GRID_PER_DECADE: usize = 8;

/// `ℓ` of the unstructured model `K = c·I_{m²} ⊗ K̃(1, λ)` as a function of
/// `c`, diagonalized once per `λ`.
pub struct UnstructuredProfile {
    /// `log(μ_q/σ_a)` pairs flattened; `μ` eigenvalues of `M`, `σ` of `Σ`.
    ratios: Vec<f64>,
    /// Squared whitened projections matching `ratios`.
    weights: Vec<f64>,
    constant: f64,
}

impl UnstructuredProfile {
    pub fn new(proj: &ProjectedData, lambda: f64, sigma: &DMatrix<f64>) -> Result<Self> {
        let kt = tc_kernel(1.0, lambda, proj.t)?;
        let grams = GramBlocks::new(proj, &kt)?;
        let eig_m = grams.total.clone().symmetric_eigen();
        let eig_s = sigma.clone().symmetric_eigen();
        if eig_s.eigenvalues.iter().any(|&s| s <= 0.0) {
            return Err(Error::NotPositiveDefinite("Σ".into()));
        }
        // w = Eᵀ Z F diag(σ^{-1/2})
        let w = eig_m.eigenvectors.tr_mul(&proj.z) * &eig_s.eigenvectors;
        let mut ratios = Vec::with_capacity(proj.p * proj.m);
        let mut weights = Vec::with_capacity(proj.p * proj.m);
        for a in 0..proj.m {
            let s = eig_s.eigenvalues[a];
            for q in 0..proj.p {
                ratios.push(eig_m.eigenvalues[q].max(0.0) / s);
                weights.push(w[(q, a)] * w[(q, a)] / s);
            }
        }
        let log_det_sigma: f64 = eig_s.eigenvalues.iter().map(|s| s.ln()).sum();
        let constant = 0.5 * proj.p as f64 * log_det_sigma + orthogonal_part(proj, sigma)?;
        Ok(Self { ratios, weights, constant })
    }

    pub fn value(&self, c: f64) -> f64 {
        let mut acc = 0.0;
        for (r, w) in self.ratios.iter().zip(&self.weights) {
            let d = 1.0 + c * r;
            acc += d.ln() + w / d;
        }
        0.5 * acc + self.constant
    }

    /// Minimizes over `c ∈ [C_MIN, C_MAX]`: log-spaced scan, then golden
    /// section between the neighbours of the best scan point.
    pub fn minimize(&self) -> (f64, f64) {
        let decades = (C_MAX / C_MIN).log10();
        let n = (decades * C_GRID_PER_DECADE as f64).round() as usize;
        let mut grid: Vec<f64> = (0..=n).map(|k| (C_MIN.ln() + (C_MAX / C_MIN).ln() * k as f64 / n as f64).exp()).collect();
        grid[0] = C_MIN;
        grid[n] = C_MAX;
        let vals: Vec<f64> = grid.iter().map(|&c| self.value(c)).collect();
        let best = (0..vals.len()).fold(0, |b, k| if vals[k] < vals[b] { k } else { b });
        if best == 0 || best == n {
            return (grid[best], vals[best]);
        }
        let (mut lo, mut hi) = (grid[best - 1].ln(), grid[best + 1].ln());
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let f = |lc: f64| self.value(lc.exp());
        let mut x1 = hi - phi * (hi - lo);
        let mut x2 = lo + phi * (hi - lo);
        let (mut f1, mut f2) = (f(x1), f(x2));
        for _ in 0..80 {
            if f1 < f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - phi * (hi - lo);
                f1 = f(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + phi * (hi - lo);
                f2 = f(x2);
            }
        }
        let c = (0.5 * (lo + hi)).exp();
        let v = self.value(c);
        if v <= vals[best] {
            (c, v)
        } else {
            (grid[best], vals[best])
        }
    }
}

/// One row of the `K̃` hyperparameter search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KtildeGridPoint {
    pub lambda: f64,
    pub c: f64,
    pub ell: f64,
}

/// Profile of the unstructured `ℓ` over [`lambda_grid`], `c` optimized per `λ`.
pub fn ktilde_grid(data: &StackedData, reg: &Regressor, sigma: &DMatrix<f64>) -> Result<Vec<KtildeGridPoint>> {
    let proj = ProjectedData::new(data, reg)?;
    ktilde_grid_projected(&proj, sigma)
}

pub fn ktilde_grid_projected(proj: &ProjectedData, sigma: &DMatrix<f64>) -> Result<Vec<KtildeGridPoint>> {
    lambda_grid()
        .into_iter()
        .map(|lambda| {
            let (c, ell) = UnstructuredProfile::new(proj, lambda, sigma)?.minimize();
            Ok(KtildeGridPoint { lambda, c, ell })
        })
        .collect()
}

/// `(c, λ)` of `K̃` minimizing the unstructured negative log-likelihood.
pub fn estimate_ktilde_hyper(data: &StackedData, reg: &Regressor, sigma: &DMatrix<f64>) -> Result<(f64, f64)> {
    let grid = ktilde_grid(data, reg, sigma)?;
    Ok(best_grid_point(&grid))
}

pub fn best_grid_point(grid: &[KtildeGridPoint]) -> (f64, f64) {
    let best = grid
        .iter()
        .fold(&grid[0], |b, g| if g.ell < b.ell { g } else { b });
    (best.c, best.lambda)
}
