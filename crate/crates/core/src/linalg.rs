//! Dense helpers shared by the estimator and the likelihood.
//!
//! Large symmetric positive-definite systems go through `faer`; everything
//! else stays in `nalgebra`, whose storage is column-major as well, so the
//! hand-off is a borrowed view in one direction and a copy in the other.

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{MatRef, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative jitter added to the diagonal when a first factorization fails.
pub const JITTER_REL: f64 = 1e-10;

/// Cholesky factor of a symmetrized SPD matrix.
pub struct SpdFactor {
    llt: faer::linalg::solvers::Llt<f64>,
    dim: usize,
    jitter: f64,
}

impl SpdFactor {
    /// Factor `0.5 (A + Aᵀ)`. On failure a single jitter of
    /// `1e-10 · trace / dim` is added to the diagonal and the factorization
    /// retried; the amount used is reported by [`SpdFactor::jitter`].
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: a.ncols() });
        }
        let mut sym = faer::Mat::<f64>::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
        if let Ok(llt) = sym.llt(Side::Lower) {
            return Ok(Self { llt, dim: n, jitter: 0.0 });
        }
        let trace: f64 = (0..n).map(|i| sym[(i, i)]).sum();
        let jitter = JITTER_REL * (trace / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
        for i in 0..n {
            sym[(i, i)] += jitter;
        }
        match sym.llt(Side::Lower) {
            Ok(llt) => Ok(Self { llt, dim: n, jitter }),
            Err(_) => Err(Error::NotPositiveDefinite(format!(
                "{n}x{n} system, jitter {jitter:.3e}"
            ))),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Diagonal jitter that had to be added (0 when the first attempt succeeded).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_det(&self) -> f64 {
        let l = self.llt.L();
        2.0 * (0..self.dim).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let rhs = MatRef::from_column_major_slice(b.as_slice(), b.len(), 1);
        let x = self.llt.solve(rhs);
        DVector::from_fn(self.dim, |i, _| x[(i, 0)])
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let rhs = MatRef::from_column_major_slice(b.as_slice(), b.nrows(), b.ncols());
        let x = self.llt.solve(rhs);
        DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| x[(i, j)])
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.llt.inverse();
        DMatrix::from_fn(self.dim, self.dim, |i, j| inv[(i, j)])
    }
}

/// `0.5 (A + Aᵀ)` in place.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Frobenius inner product `⟨A, B⟩ = Σ A_ij B_ij` of two equally shaped views.
pub fn frob_dot<S1, S2>(
    a: &nalgebra::Matrix<f64, nalgebra::Dyn, nalgebra::Dyn, S1>,
    b: &nalgebra::Matrix<f64, nalgebra::Dyn, nalgebra::Dyn, S2>,
) -> f64
where
    S1: nalgebra::RawStorage<f64, nalgebra::Dyn, nalgebra::Dyn>,
    S2: nalgebra::RawStorage<f64, nalgebra::Dyn, nalgebra::Dyn>,
{
    debug_assert_eq!(a.shape(), b.shape());
    let mut acc = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            acc += a[(i, j)] * b[(i, j)];
        }
    }
    acc
}

/// Symmetric PSD square root factor: returns `C` with `C Cᵀ = A`, tolerating
/// zero eigenvalues (eigenvalues below `-tol·max` are rejected).
pub fn psd_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut sym = a.clone();
    symmetrize(&mut sym);
    if let Some(ch) = sym.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut c = DMatrix::zeros(n, n);
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev < -1e-10 * max.max(f64::MIN_POSITIVE) {
            return Err(Error::NotPositiveDefinite(format!("eigenvalue {ev:.3e}")));
        }
        let s = ev.max(0.0).sqrt();
        for i in 0..n {
            c[(i, k)] = eig.eigenvectors[(i, k)] * s;
        }
    }
    Ok(c)
}

/// Spectral radius of the block companion matrix of `y(t) = Σ_k G_k y(t-k)`.
pub fn companion_spectral_radius(coeffs: &[DMatrix<f64>]) -> f64 {
    if coeffs.is_empty() {
        return 0.0;
    }
    let m = coeffs[0].nrows();
    let lags = coeffs.len();
    let n = m * lags;
    let mut comp = DMatrix::<f64>::zeros(n, n);
    for (k, g) in coeffs.iter().enumerate() {
        comp.view_mut((0, k * m), (m, m)).copy_from(g);
    }
    for i in m..n {
        comp[(i, i - m)] = 1.0;
    }
    comp.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}
