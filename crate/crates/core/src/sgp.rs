//! Scaled gradient projection on the nonnegative orthant.
//!
//! Each iteration projects a scaled gradient step,
//! `d = P(x - α D ∇f(x)) - x`, and backtracks along `d` with an Armijo test.
//! `D` is a diagonal inverse-Hessian estimate supplied by the objective
//! (identity when it has none) and `α` follows the scaled Barzilai-Borwein
//! rules with adaptive alternation. The objective trace is monotone
//! nonincreasing and every iterate is feasible.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::format_f64;

/// A differentiable objective on `x ≥ 0`.
pub trait Objective {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Diagonal inverse-Hessian estimate at `x`. `None` means identity.
    fn scaling(&self, _x: &[f64], _grad: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// Adapter for a pair of closures.
pub struct FnObjective<F, G> {
    pub f: F,
    pub grad: G,
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok((self.f)(x))
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok(((self.f)(x), (self.grad)(x)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgpOptions {
    /// Stop when `‖P(x - ∇f) - x‖∞ ≤ tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub max_backtracks: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub step_min: f64,
    pub step_max: f64,
    /// Stop after this many consecutive accepted steps whose decrease is
    /// within a few ulps of `|f|`.
    pub stall_iters: usize,
}

impl Default for SgpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
            armijo: 1e-4,
            max_backtracks: 60,
            scale_min: 1e-6,
            scale_max: 1e6,
            step_min: 1e-5,
            step_max: 1e5,
            stall_iters: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    /// Accepted backtracking factor (0 for the initial point).
    pub step: f64,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgpResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    /// The line search ran out of halvings; `x` is the best iterate found.
    pub line_search_failed: bool,
    /// Progress fell below floating-point resolution before `tol` was met.
    pub stalled: bool,
}

impl SgpResult {
    pub fn iterations(&self) -> usize {
        self.trace.len().saturating_sub(1)
    }

    pub fn kkt_residual(&self) -> f64 {
        self.trace.last().map_or(f64::INFINITY, |r| r.kkt_residual)
    }
}

/// `‖P(x - g) - x‖∞` with `P` the projection onto `x ≥ 0`.
pub fn kkt_residual(x: &[f64], g: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| ((xi - gi).max(0.0) - xi).abs())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sgp_minimize<O: Objective + ?Sized>(obj: &O, x0: &[f64], opts: &SgpOptions) -> Result<SgpResult> {
    if let Some(v) = x0.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("starting point must be feasible, found {v}")));
    }
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = obj.value_and_gradient(&x)?;
    if !f.is_finite() {
        return Err(Error::Numerical("objective is not finite at the starting point".into()));
    }
    let mut trace = vec![TraceRow { iter: 0, objective: f, step: 0.0, kkt_residual: kkt_residual(&x, &g) }];
    let clip_scale = |d: Option<Vec<f64>>| -> Vec<f64> {
        d.unwrap_or_else(|| vec![1.0; n])
            .into_iter()
            .map(|v| if v.is_finite() { v.clamp(opts.scale_min, opts.scale_max) } else { 1.0 })
            .collect()
    };
    let mut scale = clip_scale(obj.scaling(&x, &g));
    let mut alpha = 1.0;
    let mut converged = false;
    let mut line_search_failed = false;
    let mut stalled = false;
    let mut flat_steps = 0;

    for iter in 1..=opts.max_iter {
        if kkt_residual(&x, &g) <= opts.tol {
            converged = true;
            break;
        }
        let mut d: Vec<f64> = (0..n).map(|i| (x[i] - alpha * scale[i] * g[i]).max(0.0) - x[i]).collect();
        let mut gd = dot(&g, &d);
        if !(gd < 0.0) {
            // Degenerate scaled direction; fall back to the plain projected gradient.
            d = (0..n).map(|i| (x[i] - g[i]).max(0.0) - x[i]).collect();
            gd = dot(&g, &d);
            if !(gd < 0.0) {
                break;
            }
        }

        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let trial: Vec<f64> = (0..n).map(|i| (x[i] + lambda * d[i]).max(0.0)).collect();
            match obj.value(&trial) {
                Ok(ft) if ft.is_finite() && ft <= f + opts.armijo * lambda * gd => {
                    accepted = Some(trial);
                    break;
                }
                Ok(_) | Err(Error::NotPositiveDefinite(_)) => lambda *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some(x_new) = accepted else {
            line_search_failed = true;
            break;
        };
        let (f_new, g_new) = obj.value_and_gradient(&x_new)?;
        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let new_scale = clip_scale(obj.scaling(&x_new, &g_new));

        // scaled Barzilai-Borwein step lengths
        let sy_d: f64 = (0..n).map(|i| s[i] * y[i] / new_scale[i]).sum();
        alpha = if sy_d <= 0.0 {
            opts.step_max
        } else {
            let bb1 = (0..n).map(|i| (s[i] / new_scale[i]).powi(2)).sum::<f64>() / sy_d;
            let sdy: f64 = (0..n).map(|i| s[i] * new_scale[i] * y[i]).sum();
            let ydy: f64 = (0..n).map(|i| (new_scale[i] * y[i]).powi(2)).sum();
            let bb2 = if ydy > 0.0 && sdy > 0.0 { sdy / ydy } else { bb1 };
            if bb2 / bb1 < 0.5 { bb2 } else { bb1 }
        }
        .clamp(opts.step_min, opts.step_max);

        if f - f_new <= 4.0 * f64::EPSILON * f.abs() {
            flat_steps += 1;
        } else {
            flat_steps = 0;
        }
        x = x_new;
        f = f_new;
        g = g_new;
        scale = new_scale;
        trace.push(TraceRow { iter, objective: f, step: lambda, kkt_residual: kkt_residual(&x, &g) });
        if flat_steps >= opts.stall_iters {
            stalled = true;
            break;
        }
    }
    if !converged && kkt_residual(&x, &g) <= opts.tol {
        converged = true;
    }
    if converged {
        stalled = false;
    }
    Ok(SgpResult { x, value: f, trace, converged, line_search_failed, stalled })
}

/// Optimizer trace as CSV `iter,objective,step,kkt_residual`.
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["iter", "objective", "step", "kkt_residual"])?;
    for row in trace {
        wtr.write_record(&[
            row.iter.to_string(),
            format_f64(row.objective),
            format_f64(row.step),
            format_f64(row.kkt_residual),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn shifted_quadratic(center: Vec<f64>) -> FnObjective<impl Fn(&[f64]) -> f64, impl Fn(&[f64]) -> Vec<f64>> {
        let c2 = center.clone();
        FnObjective {
            f: move |x: &[f64]| 0.5 * x.iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
            grad: move |x: &[f64]| x.iter().zip(&c2).map(|(a, b)| a - b).collect(),
        }
    }

    fn assert_monotone(trace: &[TraceRow]) {
        for w in trace.windows(2) {
            assert!(w[1].objective <= w[0].objective);
        }
    }

    #[test]
    fn interior_minimum() {
        let res = sgp_minimize(&shifted_quadratic(vec![1.0, 2.0]), &[0.0, 0.0], &SgpOptions::default()).unwrap();
        assert!(res.converged);
        assert_relative_eq!(res.x[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(res.x[1], 2.0, epsilon = 1e-6);
        assert!(res.kkt_residual() <= 1e-5);
        assert_monotone(&res.trace);
    }

    #[test]
    fn active_constraint() {
        let res = sgp_minimize(&shifted_quadratic(vec![-1.0, 2.0]), &[3.0, 3.0], &SgpOptions::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.x[0], 0.0);
        assert_relative_eq!(res.x[1], 2.0, epsilon = 1e-6);
        assert!(res.kkt_residual() <= 1e-5);
        assert_monotone(&res.trace);
    }

    #[test]
    fn infeasible_start_rejected() {
        assert!(sgp_minimize(&shifted_quadratic(vec![1.0]), &[-1.0], &SgpOptions::default()).is_err());
    }

    #[test]
    fn ill_conditioned_quadratic() {
        // f = ½ Σ h_i (x_i - c_i)², h spans six decades
        let h = [1e-3, 1.0, 1e3];
        let c = [2.0, -1.0, 0.5];
        let obj = FnObjective {
            f: |x: &[f64]| 0.5 * (0..3).map(|i| h[i] * (x[i] - c[i]).powi(2)).sum::<f64>(),
            grad: |x: &[f64]| (0..3).map(|i| h[i] * (x[i] - c[i])).collect(),
        };
        let opts = SgpOptions { tol: 1e-9, max_iter: 5000, ..Default::default() };
        let res = sgp_minimize(&obj, &[1.0, 1.0, 1.0], &opts).unwrap();
        assert!(res.converged, "kkt {}", res.kkt_residual());
        assert_relative_eq!(res.x[2], 0.5, epsilon = 1e-9);
        assert_eq!(res.x[1], 0.0);
        assert_monotone(&res.trace);
    }

    #[test]
    fn stalls_at_float_resolution() {
        // the offset puts the reachable decrease below ulp(f) long before tol
        let obj = FnObjective {
            f: |x: &[f64]| 1e8 + (x[0] - 1.0).powi(4),
            grad: |x: &[f64]| vec![4.0 * (x[0] - 1.0).powi(3)],
        };
        let opts = SgpOptions { tol: 1e-14, ..Default::default() };
        let res = sgp_minimize(&obj, &[3.0], &opts).unwrap();
        assert!(res.stalled && !res.converged);
        assert!(res.iterations() < 100);
        assert!((res.x[0] - 1.0).abs() < 0.05);
        assert_monotone(&res.trace);
    }

    #[test]
    fn trace_csv_header() {
        let res = sgp_minimize(&shifted_quadratic(vec![1.0]), &[0.0], &SgpOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&res.trace, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("iter,objective,step,kkt_residual\n0,"));
    }

    proptest! {
        #[test]
        fn convex_quadratics_reach_kkt(
            seed_a in proptest::collection::vec(-1.0f64..1.0, 9),
            center in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            let a = nalgebra::DMatrix::from_row_slice(3, 3, &seed_a);
            let q = &a * a.transpose() + nalgebra::DMatrix::identity(3, 3) * 0.5;
            let c = nalgebra::DVector::from_vec(center);
            let q2 = q.clone();
            let c2 = c.clone();
            let obj = FnObjective {
                f: move |x: &[f64]| {
                    let d = nalgebra::DVector::from_column_slice(x) - &c;
                    0.5 * d.dot(&(&q * &d))
                },
                grad: move |x: &[f64]| {
                    let d = nalgebra::DVector::from_column_slice(x) - &c2;
                    (&q2 * d).iter().copied().collect()
                },
            };
            let res = sgp_minimize(&obj, &[1.0, 1.0, 1.0], &SgpOptions { max_iter: 2000, ..Default::default() }).unwrap();
            prop_assert!(res.converged);
            prop_assert!(res.x.iter().all(|&v| v >= 0.0));
            for w in res.trace.windows(2) {
                prop_assert!(w[1].objective <= w[0].objective);
            }
        }
    }
}
