//! Innovation covariance from a long autoregressive least-squares fit.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::sim::TimeSeries;

/// Ridge added to the normal equations when the regressor is rank deficient.
pub const RIDGE_FALLBACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaEstimate {
    pub sigma: DMatrix<f64>,
    pub arx_order: usize,
    /// `(N - order) × m`, row `s` is the residual at sample `order + s`.
    pub residuals: DMatrix<f64>,
}

impl SigmaEstimate {
    /// `Σ̂ + 1e-8·tr(Σ̂)/m·I`, safe to use as an SPD weight.
    pub fn regularized(&self) -> DMatrix<f64> {
        let m = self.sigma.nrows();
        let shift = 1e-8 * self.sigma.trace() / m as f64;
        let shift = if shift > 0.0 { shift } else { 1e-12 };
        &self.sigma + DMatrix::identity(m, m) * shift
    }
}

/// `min(2T, ⌊N/(4m)⌋)`, at least 1.
pub fn default_arx_order(t: usize, n: usize, m: usize) -> usize {
    (2 * t).min(n / (4 * m.max(1))).max(1)
}

/// Lagged regressor: row `s` is `[y(order+s-1)ᵀ, …, y(s)ᵀ]`.
fn arx_regressor(ts: &TimeSeries, order: usize) -> DMatrix<f64> {
    let m = ts.m();
    let rows = ts.len() - order;
    DMatrix::from_fn(rows, m * order, |s, col| {
        let (k, j) = (col / m, col % m);
        ts.values[(order + s - 1 - k, j)]
    })
}

/// Fits `y(t) ≈ Σ_{k=1..order} A_k y(t-k)` by least squares and returns the
/// residual covariance `Σ̂ = RᵀR / (N - order)`.
pub fn estimate_sigma(ts: &TimeSeries, order: usize) -> Result<SigmaEstimate> {
    if order == 0 {
        return Err(Error::InvalidArgument("ARX order must be positive".into()));
    }
    let (n, m) = (ts.len(), ts.m());
    if n <= m * order + m {
        return Err(Error::InsufficientData(format!(
            "ARX order {order} needs N > {}, got N = {n}",
            m * order + m
        )));
    }
    let x = arx_regressor(ts, order);
    let y = ts.values.rows(order, n - order).into_owned();

    let qr = x.clone().qr();
    let r = qr.r();
    let diag_max = r.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let well_posed = r.diagonal().iter().all(|v| v.abs() > 1e-12 * diag_max.max(f64::MIN_POSITIVE));
    let coef = if well_posed {
        let qty = qr.q().tr_mul(&y);
        r.solve_upper_triangular(&qty)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?
    } else {
        let p = x.ncols();
        let xtx = x.tr_mul(&x);
        let ridge = RIDGE_FALLBACK * (xtx.trace() / p as f64).max(1.0);
        (xtx + DMatrix::identity(p, p) * ridge)
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("ridge-regularized ARX normal equations".into()))?
            .solve(&x.tr_mul(&y))
    };
    let residuals = y - &x * coef;
    let mut sigma = residuals.tr_mul(&residuals) / (n - order) as f64;
    crate::linalg::symmetrize(&mut sigma);
    Ok(SigmaEstimate { sigma, arx_order: order, residuals })
}
