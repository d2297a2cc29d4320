//! Linear-regression form `y = Φθ + e` of a truncated multivariate predictor.
//!
//! `θ` stacks the impulse responses `g^{[ij]} = ([G_1]_ij, ..., [G_T]_ij)`
//! block by block in row-major `(i, j)` order. The stacked outputs are
//! component-major over the `N' = N - T` usable time indices, and the full
//! regressor is `Φ = I_m ⊗ Ψ`; only `Ψ` is stored.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::TimeSeries;

/// Index bookkeeping for `θ ∈ ℝ^{m²T}`. All indices are zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThetaLayout {
    pub m: usize,
    #[serde(rename = "T")]
    pub t: usize,
}

impl ThetaLayout {
    pub fn new(m: usize, t: usize) -> Self {
        Self { m, t }
    }

    pub fn len(&self) -> usize {
        self.m * self.m * self.t
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_blocks(&self) -> usize {
        self.m * self.m
    }

    /// Block of `g^{[ij]}`: output `i`, input `j`.
    pub fn block_index(&self, i: usize, j: usize) -> usize {
        i * self.m + j
    }

    /// Position of `[G_{lag+1}]_ij`.
    pub fn offset(&self, i: usize, j: usize, lag: usize) -> usize {
        self.block_index(i, j) * self.t + lag
    }

    pub fn block_range(&self, i: usize, j: usize) -> std::ops::Range<usize> {
        let start = self.block_index(i, j) * self.t;
        start..start + self.t
    }

    /// All coefficients driving output `i` (`g^{[i1]}, ..., g^{[im]}`).
    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        let width = self.m * self.t;
        i * width..(i + 1) * width
    }

    fn check(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: theta.len() });
        }
        Ok(())
    }
}

/// Rebuilds `G_1..G_T` from a stacked coefficient vector.
pub fn unstack_theta(theta: &DVector<f64>, layout: ThetaLayout) -> Result<Vec<DMatrix<f64>>> {
    layout.check(theta)?;
    let m = layout.m;
    Ok((0..layout.t)
        .map(|lag| DMatrix::from_fn(m, m, |i, j| theta[layout.offset(i, j, lag)]))
        .collect())
}

/// Inverse of [`unstack_theta`].
pub fn stack_theta(coeffs: &[DMatrix<f64>]) -> Result<DVector<f64>> {
    let t = coeffs.len();
    if t == 0 {
        return Err(Error::InvalidArgument("at least one lag is required".into()));
    }
    let m = coeffs[0].nrows();
    let layout = ThetaLayout::new(m, t);
    let mut theta = DVector::zeros(layout.len());
    for (lag, g) in coeffs.iter().enumerate() {
        if g.shape() != (m, m) {
            return Err(Error::DimensionMismatch { expected: m, got: g.nrows() });
        }
        for i in 0..m {
            for j in 0..m {
                theta[layout.offset(i, j, lag)] = g[(i, j)];
            }
        }
    }
    Ok(theta)
}

/// Component-major stacked outputs `[y_1(T+1..N), ..., y_m(T+1..N)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedData {
    pub y: DVector<f64>,
    pub m: usize,
    pub n_prime: usize,
}

impl StackedData {
    /// Samples of component `i`.
    pub fn component(&self, i: usize) -> nalgebra::DVectorView<'_, f64> {
        self.y.rows(i * self.n_prime, self.n_prime)
    }

    /// Back to an `N' × m` matrix whose row `t` is `y(T+1+t)ᵀ`.
    pub fn unstack(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_prime, self.m, |t, i| self.y[i * self.n_prime + t])
    }
}

fn check_length(ts: &TimeSeries, t: usize) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidArgument("truncation length T must be positive".into()));
    }
    if ts.len() <= t {
        return Err(Error::InsufficientData(format!(
            "N={} samples but T={t} lags leaves no usable rows",
            ts.len()
        )));
    }
    Ok(())
}

pub fn stack_outputs(ts: &TimeSeries, t: usize) -> Result<StackedData> {
    check_length(ts, t)?;
    let n_prime = ts.len() - t;
    let m = ts.m();
    let y = DVector::from_fn(m * n_prime, |idx, _| {
        let (i, s) = (idx / n_prime, idx % n_prime);
        ts.values[(t + s, i)]
    });
    Ok(StackedData { y, m, n_prime })
}

/// Shared regressor block `Ψ` of `Φ = I_m ⊗ Ψ`.
///
/// Row `s` corresponds to time `T+1+s` and holds
/// `[y_1(t-1..t-T), ..., y_m(t-1..t-T)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    pub psi: DMatrix<f64>,
    pub m: usize,
    pub t: usize,
}

impl Regressor {
    pub fn layout(&self) -> ThetaLayout {
        ThetaLayout::new(self.m, self.t)
    }

    pub fn n_prime(&self) -> usize {
        self.psi.nrows()
    }

    /// `Φθ`, stacked like [`StackedData::y`].
    pub fn predict(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.layout().check(theta)?;
        let n_prime = self.n_prime();
        let width = self.m * self.t;
        let mut out = DVector::zeros(self.m * n_prime);
        for i in 0..self.m {
            let block = theta.rows(i * width, width);
            out.rows_mut(i * n_prime, n_prime).copy_from(&(&self.psi * block));
        }
        Ok(out)
    }

    /// `Φᵀ v` for a stacked vector `v`.
    pub fn transpose_apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let n_prime = self.n_prime();
        if v.len() != self.m * n_prime {
            return Err(Error::DimensionMismatch { expected: self.m * n_prime, got: v.len() });
        }
        let width = self.m * self.t;
        let mut out = DVector::zeros(self.m * width);
        for i in 0..self.m {
            let part = self.psi.tr_mul(&v.rows(i * n_prime, n_prime).into_owned());
            out.rows_mut(i * width, width).copy_from(&part);
        }
        Ok(out)
    }

    /// Columns of `Ψ` holding the lags of input `j`.
    pub fn input_columns(&self, j: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.psi.columns(j * self.t, self.t)
    }

    /// Dense `Φ = I_m ⊗ Ψ`, for cross-checks on small problems.
    pub fn dense_phi(&self) -> DMatrix<f64> {
        DMatrix::<f64>::identity(self.m, self.m).kronecker(&self.psi)
    }
}

pub fn build_regressor(ts: &TimeSeries, t: usize) -> Result<Regressor> {
    check_length(ts, t)?;
    let n_prime = ts.len() - t;
    let m = ts.m();
    let psi = DMatrix::from_fn(n_prime, m * t, |s, col| {
        let (j, lag) = (col / t, col % t);
        // time index T+s predicts from T+s-1-lag
        ts.values[(t + s - 1 - lag, j)]
    });
    Ok(Regressor { psi, m, t })
}

/// `‖r‖²_{Σ⁻¹ ⊗ I}` of a stacked residual, computed blockwise.
pub fn weighted_sq_norm(residual: &DVector<f64>, sigma_inv: &DMatrix<f64>, n_prime: usize) -> f64 {
    let m = sigma_inv.nrows();
    let mut acc = 0.0;
    for i in 0..m {
        let ri = residual.rows(i * n_prime, n_prime);
        for k in 0..m {
            let w = sigma_inv[(i, k)];
            if w != 0.0 {
                acc += w * ri.dot(&residual.rows(k * n_prime, n_prime));
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_series(n: usize, m: usize, seed: u64) -> TimeSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TimeSeries::new(DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0)), None).unwrap()
    }

    #[test]
    fn stacking_order_is_component_major() {
        // rows y(1)=(x,x), y(2)=(a,b), y(3)=(c,d)
        let ts = TimeSeries::new(DMatrix::from_row_slice(3, 2, &[9.0, 9.0, 1.0, 2.0, 3.0, 4.0]), None).unwrap();
        let s = stack_outputs(&ts, 1).unwrap();
        assert_eq!(s.y.as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(s.n_prime, 2);
        assert_eq!(s.unstack(), ts.values.rows(1, 2).into_owned());
    }

    #[test]
    fn single_effective_sample() {
        let ts = random_series(4, 3, 1);
        let s = stack_outputs(&ts, 3).unwrap();
        assert_eq!(s.y.len(), 3);
        assert!(matches!(stack_outputs(&ts, 4), Err(Error::InsufficientData(_))));
        assert!(build_regressor(&ts, 4).is_err());
    }

    #[test]
    fn scalar_ar1_prediction() {
        let ts = TimeSeries::new(DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]), None).unwrap();
        let reg = build_regressor(&ts, 1).unwrap();
        let pred = reg.predict(&DVector::from_element(1, 0.5)).unwrap();
        assert_eq!(pred.as_slice(), &[0.5, 1.0, 1.5]);
        let zero = reg.predict(&DVector::zeros(1)).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prediction_matches_direct_convolution() {
        let (m, t, n) = (3, 4, 30);
        let ts = random_series(n, m, 7);
        let reg = build_regressor(&ts, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let coeffs: Vec<DMatrix<f64>> =
            (0..t).map(|_| DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0))).collect();
        let theta = stack_theta(&coeffs).unwrap();
        let pred = reg.predict(&theta).unwrap();
        for s in 0..(n - t) {
            let time = t + s;
            for i in 0..m {
                let mut direct = 0.0;
                for (lag, g) in coeffs.iter().enumerate() {
                    for j in 0..m {
                        direct += g[(i, j)] * ts.values[(time - lag - 1, j)];
                    }
                }
                assert_relative_eq!(pred[i * (n - t) + s], direct, epsilon = 1e-13);
            }
        }
        let dense = reg.dense_phi() * &theta;
        assert_relative_eq!((dense - pred).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn dense_phi_is_block_diagonal() {
        let ts = random_series(12, 2, 3);
        let reg = build_regressor(&ts, 3).unwrap();
        let phi = reg.dense_phi();
        assert_eq!(phi.shape(), (2 * 9, 4 * 3));
        assert_eq!(phi.view((0, 0), (9, 6)).into_owned(), reg.psi);
        assert_eq!(phi.view((9, 6), (9, 6)).into_owned(), reg.psi);
        assert!(phi.view((0, 6), (9, 6)).iter().all(|&v| v == 0.0));
        let v = DVector::from_fn(18, |i, _| i as f64);
        assert_relative_eq!((phi.transpose() * &v - reg.transpose_apply(&v).unwrap()).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn weighted_norm_blockwise_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, np) = (3, 7);
        let r = DVector::from_fn(m * np, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let sigma_inv = &a * a.transpose() + DMatrix::identity(m, m);
        let dense = r.dot(&(sigma_inv.kronecker(&DMatrix::<f64>::identity(np, np)) * &r));
        let block = weighted_sq_norm(&r, &sigma_inv, np);
        assert_relative_eq!(block, dense, max_relative = 1e-12);
    }

    #[test]
    fn layout_offsets() {
        let layout = ThetaLayout::new(2, 5);
        // (i=2, j=1, k=3) one-based: block 3, global position 2·5+3.
        assert_eq!(layout.block_index(1, 0), 2);
        assert_eq!(layout.offset(1, 0, 2) + 1, 2 * 5 + 3);
        let mut theta = DVector::zeros(layout.len());
        theta[0] = 1.0;
        let g = unstack_theta(&theta, layout).unwrap();
        assert_eq!(g[0][(0, 0)], 1.0);
        assert_eq!(g.iter().map(|x| x.iter().filter(|&&v| v != 0.0).count()).sum::<usize>(), 1);
        assert!(unstack_theta(&DVector::zeros(3), layout).is_err());
    }

    proptest! {
        #[test]
        fn stack_unstack_round_trip(m in 1usize..4, t in 1usize..5, seed in 0u64..1000) {
            let layout = ThetaLayout::new(m, t);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta = DVector::from_fn(layout.len(), |_, _| rng.random_range(-1.0..1.0));
            let back = stack_theta(&unstack_theta(&theta, layout).unwrap()).unwrap();
            prop_assert_eq!(back, theta);
        }
    }
}
