//! Stability kernel `K̃` and the Kronecker-structured priors
//! `K_S = Γ ⊗ K̃` (sparse part) and `K_L = Λ ⊗ I_m ⊗ K̃` (low-rank part).
//!
//! Both priors are kept in factored form. Products with `K` and prior draws
//! go through the factors; dense assembly exists for verification only.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::psd_factor;

/// Tolerance on `UᵀU = I`.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// Tuned/correlated kernel `K̃[k,l] = c·λ^{max(k,l)}`, lags one-based.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTilde {
    pub c: f64,
    pub lambda: f64,
    pub t: usize,
    matrix: DMatrix<f64>,
}

pub fn tc_kernel(c: f64, lambda: f64, t: usize) -> Result<KernelTilde> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!("TC scale c={c} must be positive")));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidArgument(format!("TC decay λ={lambda} not in (0,1)")));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("kernel needs at least one lag".into()));
    }
    let matrix = DMatrix::from_fn(t, t, |k, l| c * lambda.powi((k.max(l) + 1) as i32));
    Ok(KernelTilde { c, lambda, t, matrix })
}

impl KernelTilde {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn same_as(&self, other: &KernelTilde) -> bool {
        self.t == other.t && self.c == other.c && self.lambda == other.lambda
    }

    /// Lower Cholesky factor.
    pub fn cholesky(&self) -> DMatrix<f64> {
        // TC is positive definite for 0<λ<1: K̃ = Σ_k (λ^k - λ^{k+1}) 1_{≤k}1_{≤k}ᵀ
        // with the last term λ^T·1 1ᵀ, all nonnegative weights.
        self.matrix
            .clone()
            .cholesky()
            .map(|c| c.l())
            .unwrap_or_else(|| psd_factor(&self.matrix).expect("TC kernel is PSD"))
    }

    /// `vᵀ K̃⁻¹ v`.
    pub fn inv_quad(&self, v: &DVector<f64>) -> f64 {
        let l = self.cholesky();
        let w = l.solve_lower_triangular(v).expect("nonsingular factor");
        w.norm_squared()
    }
}

/// Dimensions shared by every prior over `θ ∈ ℝ^{m²T}`.
pub trait Kernel {
    fn m(&self) -> usize;
    fn ktilde(&self) -> &KernelTilde;

    fn dim(&self) -> usize {
        self.m() * self.m() * self.ktilde().t
    }

    fn matvec(&self, v: &DVector<f64>) -> Result<DVector<f64>>;
    fn dense(&self) -> DMatrix<f64>;
    /// One zero-mean Gaussian draw with this covariance.
    fn sample_with(&self, rng: &mut ChaCha8Rng) -> DVector<f64>;
    /// Common representation `diag(γ) ⊗ K̃ + Λ ⊗ I_m ⊗ K̃`.
    fn to_prior(&self) -> PriorKernel;
}

fn check_len(v: &DVector<f64>, n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: v.len() });
    }
    Ok(())
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// `K_S = Γ ⊗ K̃` with `Γ = diag(γ)` ordered like the `θ` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseKernel {
    pub gamma: Vec<f64>,
    pub ktilde: KernelTilde,
    m: usize,
}

pub fn build_sparse_kernel(gamma: Vec<f64>, ktilde: KernelTilde) -> Result<SparseKernel> {
    let m = (gamma.len() as f64).sqrt().round() as usize;
    if m == 0 || m * m != gamma.len() {
        return Err(Error::InvalidArgument(format!("γ has length {}, not a perfect square", gamma.len())));
    }
    if let Some(g) = gamma.iter().find(|g| !(**g >= 0.0) || !g.is_finite()) {
        return Err(Error::InvalidArgument(format!("γ entries must be nonnegative, got {g}")));
    }
    Ok(SparseKernel { gamma, ktilde, m })
}

impl Kernel for SparseKernel {
    fn m(&self) -> usize {
        self.m
    }

    fn ktilde(&self) -> &KernelTilde {
        &self.ktilde
    }

    fn matvec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(v, self.dim())?;
        let t = self.ktilde.t;
        let mut out = DVector::zeros(v.len());
        for (b, &g) in self.gamma.iter().enumerate() {
            if g != 0.0 {
                let blk = self.ktilde.matrix() * v.rows(b * t, t) * g;
                out.rows_mut(b * t, t).copy_from(&blk);
            }
        }
        Ok(out)
    }

    fn dense(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.gamma.clone())).kronecker(self.ktilde.matrix())
    }

    fn sample_with(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let t = self.ktilde.t;
        let chol = self.ktilde.cholesky();
        let mut out = DVector::zeros(self.dim());
        for (b, &g) in self.gamma.iter().enumerate() {
            let z = normals(rng, t);
            if g != 0.0 {
                out.rows_mut(b * t, t).copy_from(&(&chol * z * g.sqrt()));
            }
        }
        out
    }

    fn to_prior(&self) -> PriorKernel {
        PriorKernel {
            m: self.m,
            ktilde: self.ktilde.clone(),
            gamma: self.gamma.clone(),
            lambda: DMatrix::zeros(self.m, self.m),
        }
    }
}

/// `K_L = Λ ⊗ I_m ⊗ K̃` with `Λ = α(I - UUᵀ) + U diag(β) Uᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankKernel {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub u: DMatrix<f64>,
    pub ktilde: KernelTilde,
    lambda: DMatrix<f64>,
}

/// `Λ = α(I - UUᵀ) + U diag(β) Uᵀ`.
pub fn lambda_matrix(alpha: f64, beta: &[f64], u: &DMatrix<f64>) -> DMatrix<f64> {
    let m = u.nrows();
    let uut = u * u.transpose();
    let mut lambda = (DMatrix::identity(m, m) - &uut) * alpha;
    for (q, &b) in beta.iter().enumerate() {
        let col = u.column(q);
        lambda += col * col.transpose() * b;
    }
    crate::linalg::symmetrize(&mut lambda);
    lambda
}

/// Checks `UᵀU = I_r` to [`ORTHONORMAL_TOL`].
pub fn check_orthonormal(u: &DMatrix<f64>) -> Result<()> {
    let r = u.ncols();
    if r > u.nrows() {
        return Err(Error::InvalidArgument(format!("U has {r} columns but only {} rows", u.nrows())));
    }
    let dev = (u.transpose() * u - DMatrix::<f64>::identity(r, r)).amax();
    if dev > ORTHONORMAL_TOL {
        return Err(Error::InvalidArgument(format!("U is not orthonormal (max deviation {dev:.3e})")));
    }
    Ok(())
}

pub fn build_lowrank_kernel(
    alpha: f64,
    beta: Vec<f64>,
    u: DMatrix<f64>,
    ktilde: KernelTilde,
) -> Result<LowRankKernel> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("α must be nonnegative, got {alpha}")));
    }
    if let Some(b) = beta.iter().find(|b| !(**b >= 0.0) || !b.is_finite()) {
        return Err(Error::InvalidArgument(format!("β entries must be nonnegative, got {b}")));
    }
    if beta.len() != u.ncols() {
        return Err(Error::DimensionMismatch { expected: u.ncols(), got: beta.len() });
    }
    if u.nrows() == 0 {
        return Err(Error::InvalidArgument("U must have m ≥ 1 rows".into()));
    }
    check_orthonormal(&u)?;
    let lambda = lambda_matrix(alpha, &beta, &u);
    Ok(LowRankKernel { alpha, beta, u, ktilde, lambda })
}

impl LowRankKernel {
    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }
}

/// `out_(i,j) = K̃ Σ_i' Λ_ii' v_(i',j)` for every block `(i, j)`.
fn lowrank_apply(lambda: &DMatrix<f64>, ktilde: &DMatrix<f64>, v: &DVector<f64>, m: usize, out: &mut DVector<f64>) {
    let t = ktilde.nrows();
    for j in 0..m {
        let x = DMatrix::from_fn(t, m, |k, i| v[(i * m + j) * t + k]);
        let y = ktilde * x * lambda;
        for i in 0..m {
            let b = (i * m + j) * t;
            for k in 0..t {
                out[b + k] += y[(k, i)];
            }
        }
    }
}

fn lowrank_dense(lambda: &DMatrix<f64>, ktilde: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    lambda.kronecker(&DMatrix::<f64>::identity(m, m)).kronecker(ktilde)
}

fn lowrank_sample(lambda: &DMatrix<f64>, chol: &DMatrix<f64>, m: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let t = chol.nrows();
    let lf = psd_factor(lambda).expect("Λ is PSD by construction");
    let mut out = DVector::zeros(m * m * t);
    for j in 0..m {
        // independent white blocks, mixed across outputs by a factor of Λ
        let z = DMatrix::from_fn(t, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = chol * z * lf.transpose();
        for i in 0..m {
            let b = (i * m + j) * t;
            for k in 0..t {
                out[b + k] = y[(k, i)];
            }
        }
    }
    out
}

impl Kernel for LowRankKernel {
    fn m(&self) -> usize {
        self.u.nrows()
    }

    fn ktilde(&self) -> &KernelTilde {
        &self.ktilde
    }

    fn matvec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(v, self.dim())?;
        let mut out = DVector::zeros(v.len());
        lowrank_apply(&self.lambda, self.ktilde.matrix(), v, self.m(), &mut out);
        Ok(out)
    }

    fn dense(&self) -> DMatrix<f64> {
        lowrank_dense(&self.lambda, self.ktilde.matrix(), self.m())
    }

    fn sample_with(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        lowrank_sample(&self.lambda, &self.ktilde.cholesky(), self.m(), rng)
    }

    fn to_prior(&self) -> PriorKernel {
        PriorKernel {
            m: self.m(),
            ktilde: self.ktilde.clone(),
            gamma: vec![0.0; self.m() * self.m()],
            lambda: self.lambda.clone(),
        }
    }
}

/// `diag(γ) ⊗ K̃ + Λ ⊗ I_m ⊗ K̃`: the general form covering `K_S`, `K_L`,
/// their sum and the unstructured `I_{m²} ⊗ K̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorKernel {
    pub m: usize,
    pub ktilde: KernelTilde,
    pub gamma: Vec<f64>,
    pub lambda: DMatrix<f64>,
}

impl PriorKernel {
    /// `I_{m²} ⊗ K̃`, independent identically distributed impulse responses.
    pub fn unstructured(m: usize, ktilde: KernelTilde) -> Self {
        Self { m, ktilde, gamma: vec![1.0; m * m], lambda: DMatrix::zeros(m, m) }
    }

    /// `K_S + K_L`.
    pub fn sum(ks: &SparseKernel, kl: &LowRankKernel) -> Result<Self> {
        if ks.m() != kl.m() {
            return Err(Error::DimensionMismatch { expected: ks.m(), got: kl.m() });
        }
        if !ks.ktilde.same_as(&kl.ktilde) {
            return Err(Error::InvalidArgument("sparse and low-rank kernels use different K̃".into()));
        }
        Ok(Self { m: ks.m(), ktilde: ks.ktilde.clone(), gamma: ks.gamma.clone(), lambda: kl.lambda.clone() })
    }

    pub fn has_lowrank(&self) -> bool {
        self.lambda.iter().any(|&v| v != 0.0)
    }
}

impl Kernel for PriorKernel {
    fn m(&self) -> usize {
        self.m
    }

    fn ktilde(&self) -> &KernelTilde {
        &self.ktilde
    }

    fn matvec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(v, self.dim())?;
        let t = self.ktilde.t;
        let mut out = DVector::zeros(v.len());
        for (b, &g) in self.gamma.iter().enumerate() {
            if g != 0.0 {
                let blk = self.ktilde.matrix() * v.rows(b * t, t) * g;
                out.rows_mut(b * t, t).copy_from(&blk);
            }
        }
        if self.has_lowrank() {
            lowrank_apply(&self.lambda, self.ktilde.matrix(), v, self.m, &mut out);
        }
        Ok(out)
    }

    fn dense(&self) -> DMatrix<f64> {
        let ks = DMatrix::from_diagonal(&DVector::from_vec(self.gamma.clone())).kronecker(self.ktilde.matrix());
        ks + lowrank_dense(&self.lambda, self.ktilde.matrix(), self.m)
    }

    fn sample_with(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let sparse = SparseKernel { gamma: self.gamma.clone(), ktilde: self.ktilde.clone(), m: self.m };
        let s = sparse.sample_with(rng);
        s + lowrank_sample(&self.lambda, &self.ktilde.cholesky(), self.m, rng)
    }

    fn to_prior(&self) -> PriorKernel {
        self.clone()
    }
}

/// Zero-mean Gaussian draw from `kernel`, deterministic in `seed`.
pub fn sample_prior<K: Kernel + ?Sized>(kernel: &K, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kernel.sample_with(&mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_orthonormal(m: usize, r: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(m, r, |_, _| rng.sample::<f64, _>(StandardNormal));
        a.qr().q()
    }

    #[test]
    fn tc_kernel_values() {
        let k = tc_kernel(1.0, 0.5, 2).unwrap();
        assert_eq!(k.matrix(), &DMatrix::from_row_slice(2, 2, &[0.5, 0.25, 0.25, 0.25]));
        let k2 = tc_kernel(2.0, 0.5, 2).unwrap();
        assert_eq!(k2.matrix(), &(k.matrix() * 2.0));
    }

    #[test]
    fn tc_kernel_rejects_bad_parameters() {
        assert!(tc_kernel(0.0, 0.5, 3).is_err());
        assert!(tc_kernel(1.0, 1.0, 3).is_err());
        assert!(tc_kernel(1.0, 0.0, 3).is_err());
        assert!(tc_kernel(1.0, 0.5, 0).is_err());
    }

    proptest! {
        #[test]
        fn tc_kernel_is_positive_definite(c in 0.01f64..10.0, lambda in 0.05f64..0.95, t in 1usize..25) {
            let k = tc_kernel(c, lambda, t).unwrap();
            let eig = k.matrix().clone().symmetric_eigen();
            prop_assert!(eig.eigenvalues.min() > 0.0);
            for i in 1..t {
                prop_assert!(k.matrix()[(i, i)] <= k.matrix()[(i - 1, i - 1)]);
            }
        }
    }

    #[test]
    fn unit_gamma_is_unstructured_prior() {
        let kt = tc_kernel(1.0, 0.7, 3).unwrap();
        let ks = build_sparse_kernel(vec![1.0; 4], kt.clone()).unwrap();
        let expected = DMatrix::<f64>::identity(4, 4).kronecker(kt.matrix());
        assert_eq!(ks.dense(), expected);
        assert_eq!(PriorKernel::unstructured(2, kt).dense(), expected);
    }

    #[test]
    fn zero_gamma_zero_block() {
        let kt = tc_kernel(1.0, 0.7, 3).unwrap();
        let ks = build_sparse_kernel(vec![1.0, 0.0, 2.0, 1.0], kt).unwrap();
        let d = ks.dense();
        assert!(d.view((3, 3), (3, 3)).iter().all(|&v| v == 0.0));
        let s = sample_prior(&ks, 3);
        assert!(s.rows(3, 3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sparse_kernel_validation() {
        let kt = tc_kernel(1.0, 0.7, 3).unwrap();
        assert!(build_sparse_kernel(vec![1.0, -1.0, 0.0, 0.0], kt.clone()).is_err());
        assert!(build_sparse_kernel(vec![1.0; 3], kt).is_err());
    }

    #[test]
    fn lowrank_limits() {
        let kt = tc_kernel(1.0, 0.6, 2).unwrap();
        let empty = DMatrix::<f64>::zeros(3, 0);
        let kl = build_lowrank_kernel(0.7, vec![], empty, kt.clone()).unwrap();
        assert_relative_eq!((kl.lambda() - DMatrix::identity(3, 3) * 0.7).norm(), 0.0, epsilon = 1e-15);

        let e1 = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let kl = build_lowrank_kernel(0.0, vec![1.0], e1, kt).unwrap();
        let mut expected = DMatrix::zeros(3, 3);
        expected[(0, 0)] = 1.0;
        assert_eq!(kl.lambda(), &expected);
        let s = sample_prior(&kl, 9);
        // only rows i = 1 of every L_k can be nonzero
        let layout = crate::regression::ThetaLayout::new(3, 2);
        assert!(s.rows(0, 6).iter().any(|&v| v != 0.0));
        for i in 1..3 {
            assert!(s.rows(layout.row_range(i).start, 6).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn lowrank_validation() {
        let kt = tc_kernel(1.0, 0.6, 2).unwrap();
        let bad = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        assert!(build_lowrank_kernel(1.0, vec![1.0], bad, kt.clone()).is_err());
        let e1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert!(build_lowrank_kernel(-1.0, vec![1.0], e1.clone(), kt.clone()).is_err());
        assert!(build_lowrank_kernel(1.0, vec![-1.0], e1.clone(), kt.clone()).is_err());
        assert!(build_lowrank_kernel(1.0, vec![1.0, 2.0], e1, kt).is_err());
    }

    #[test]
    fn lambda_spectrum() {
        let u = random_orthonormal(5, 2, 4);
        let lambda = lambda_matrix(0.3, &[2.0, 0.1], &u);
        let mut eig: Vec<f64> = lambda.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        let mut expected = vec![0.1, 0.3, 0.3, 0.3, 2.0];
        expected.sort_by(f64::total_cmp);
        for (a, b) in eig.iter().zip(&expected) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
        let zero_alpha = lambda_matrix(0.0, &[2.0, 0.1], &u);
        assert_eq!(zero_alpha.rank(1e-10), 2);
    }

    #[test]
    fn kronecker_dense_and_matvec_agree() {
        let kt = tc_kernel(0.8, 0.7, 3).unwrap();
        let m = 3;
        let u = random_orthonormal(m, 2, 1);
        let kl = build_lowrank_kernel(0.2, vec![1.5, 0.4], u, kt.clone()).unwrap();
        let ks = build_sparse_kernel((0..9).map(|i| (i % 3) as f64 * 0.5).collect(), kt.clone()).unwrap();

        let lam = kl.lambda().clone();
        // entry-wise: cov(l^{ij}_k, l^{i'j'}_l) = Λ_ii' δ_jj' K̃_kl
        let d = kl.dense();
        let t = 3;
        for (i, ip, j, jp, k, l) in [(0, 1, 2, 2, 0, 1), (2, 0, 1, 1, 2, 2), (1, 1, 0, 2, 1, 0)] {
            let row = (i * m + j) * t + k;
            let col = (ip * m + jp) * t + l;
            let expect = if j == jp { lam[(i, ip)] * kt.matrix()[(k, l)] } else { 0.0 };
            assert_relative_eq!(d[(row, col)], expect, epsilon = 1e-15);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = DVector::from_fn(ks.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        for kern in [&ks as &dyn Kernel, &kl as &dyn Kernel] {
            let direct = kern.dense() * &v;
            let fast = kern.matvec(&v).unwrap();
            assert!((direct - &fast).norm() <= 1e-12 * fast.norm());
        }
        let sum = PriorKernel::sum(&ks, &kl).unwrap();
        assert_relative_eq!((sum.dense() - ks.dense() - kl.dense()).norm(), 0.0, epsilon = 1e-14);
        let eig = sum.dense().symmetric_eigen().eigenvalues;
        assert!(eig.min() > -1e-12);
    }

    #[test]
    fn zero_kernel_zero_sample() {
        let kt = tc_kernel(1.0, 0.5, 4).unwrap();
        let ks = build_sparse_kernel(vec![0.0; 4], kt.clone()).unwrap();
        assert!(sample_prior(&ks, 1).iter().all(|&v| v == 0.0));
        let kl = build_lowrank_kernel(0.0, vec![], DMatrix::zeros(2, 0), kt).unwrap();
        assert!(sample_prior(&kl, 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sample_covariance_matches_dense_kernel() {
        let kt = tc_kernel(1.0, 0.6, 2).unwrap();
        let u = random_orthonormal(2, 1, 3);
        let kl = build_lowrank_kernel(0.3, vec![1.2], u, kt.clone()).unwrap();
        let ks = build_sparse_kernel(vec![1.0, 0.5, 0.0, 2.0], kt).unwrap();
        let prior = PriorKernel::sum(&ks, &kl).unwrap();
        let n = prior.dim();
        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut cov = DMatrix::<f64>::zeros(n, n);
        let mut cross = DMatrix::<f64>::zeros(n, n);
        for _ in 0..draws {
            let s = ks.sample_with(&mut rng);
            let l = kl.sample_with(&mut rng);
            let x = &s + &l;
            cov += &x * x.transpose();
            cross += &s * l.transpose();
        }
        cov /= draws as f64;
        cross /= draws as f64;
        let dense = prior.dense();
        assert!((&cov - &dense).norm() / dense.norm() < 0.02);
        assert!(cross.norm() / dense.norm() < 0.02);
    }
}
