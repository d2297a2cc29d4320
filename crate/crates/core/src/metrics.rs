//! Support extraction, complexity/fit indexes and network export.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::PredictorEstimate;
use crate::sim::{GroundTruthModel, TimeSeries};

pub const DEFAULT_THRESHOLD: f64 = 0.05;

/// Pairs `(i, j)` whose sparse block `ŝ^{[ij]}` has norm above
/// `rel_threshold · max ‖ŝ^{[ij]}‖`. Exactly zero blocks never qualify.
pub fn support(estimate: &PredictorEstimate, rel_threshold: f64) -> Result<BTreeSet<(usize, usize)>> {
    if !(0.0..1.0).contains(&rel_threshold) {
        return Err(Error::InvalidArgument(format!("threshold {rel_threshold} not in [0,1)")));
    }
    let layout = estimate.layout;
    let m = layout.m;
    let norms: Vec<((usize, usize), f64)> = (0..m)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| ((i, j), estimate.theta_s.rows_range(layout.block_range(i, j)).norm()))
        .collect();
    let max = norms.iter().map(|(_, n)| *n).fold(0.0, f64::max);
    Ok(norms
        .into_iter()
        .filter(|&(_, n)| n > 0.0 && n > rel_threshold * max)
        .map(|(ij, _)| ij)
        .collect())
}

/// Per-run inputs to the complexity index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunComplexity {
    pub support_size: usize,
    pub r: usize,
    pub m: usize,
    #[serde(rename = "T")]
    pub t: usize,
}

impl RunComplexity {
    /// `T·|support| + r·m·T + r·m`.
    pub fn parameter_count(&self) -> usize {
        self.t * self.support_size + self.r * self.m * self.t + self.r * self.m
    }

    /// `#SL / (m²T)`.
    pub fn relative(&self) -> f64 {
        self.parameter_count() as f64 / (self.m * self.m * self.t) as f64
    }
}

/// Average relative complexity in percent.
pub fn ac(runs: &[RunComplexity]) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no runs".into()));
    }
    Ok(100.0 * runs.iter().map(RunComplexity::relative).sum::<f64>() / runs.len() as f64)
}

/// One-step predictions `ŷ(t) = Σ_k G_k y(t-k)` for `t = start..N`.
pub fn one_step_predictions(test: &TimeSeries, coeffs: &[DMatrix<f64>], start: usize) -> Result<DMatrix<f64>> {
    let (n, m) = (test.len(), test.m());
    if start < coeffs.len() || start >= n {
        return Err(Error::InsufficientData(format!(
            "prediction start {start} needs {} ≤ start < N = {n}",
            coeffs.len()
        )));
    }
    if let Some(g) = coeffs.iter().find(|g| g.shape() != (m, m)) {
        return Err(Error::DimensionMismatch { expected: m, got: g.nrows() });
    }
    let mut pred = DMatrix::zeros(n - start, m);
    for t in start..n {
        let mut row = nalgebra::RowDVector::zeros(m);
        for (k, g) in coeffs.iter().enumerate() {
            row += test.values.row(t - k - 1) * g.transpose();
        }
        pred.set_row(t - start, &row);
    }
    Ok(pred)
}

/// COD with sums over `t = start..N` and `ȳ` the mean of the whole test set.
pub fn cod_from(test: &TimeSeries, coeffs: &[DMatrix<f64>], start: usize) -> Result<f64> {
    let pred = one_step_predictions(test, coeffs, start)?;
    let actual = test.values.rows(start, test.len() - start);
    let mean = test.values.row_mean();
    let num = (actual - &pred).norm_squared();
    let den: f64 = actual.row_iter().map(|r| (r - &mean).norm_squared()).sum();
    if den == 0.0 {
        return Err(Error::Numerical("constant test data: COD undefined".into()));
    }
    Ok(100.0 * (1.0 - num / den))
}

/// One-step coefficient of determination in percent over the usable range
/// `t = T..N`.
pub fn cod(test: &TimeSeries, predictor: &PredictorEstimate) -> Result<f64> {
    if test.len() <= predictor.layout.t {
        return Err(Error::InsufficientData(format!("test length {} ≤ T", test.len())));
    }
    cod_from(test, &predictor.coefficients(), predictor.layout.t)
}

/// `100·(1 - Σ_k ‖G_k - Ĝ_k‖² / Σ_k ‖G_k - Ḡ‖²)`, `Ḡ` the mean of the `G_k`.
pub fn fit_percentage(truth: &[DMatrix<f64>], est: &[DMatrix<f64>]) -> Result<f64> {
    if truth.is_empty() || truth.len() != est.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), got: est.len() });
    }
    let shape = truth[0].shape();
    if let Some(g) = truth.iter().chain(est).find(|g| g.shape() != shape) {
        return Err(Error::DimensionMismatch { expected: shape.0, got: g.nrows() });
    }
    let mean = truth.iter().fold(DMatrix::zeros(shape.0, shape.1), |acc, g| acc + g) / truth.len() as f64;
    let num: f64 = truth.iter().zip(est).map(|(g, h)| (g - h).norm_squared()).sum();
    let den: f64 = truth.iter().map(|g| (g - &mean).norm_squared()).sum();
    if den == 0.0 {
        return Err(Error::Numerical("true coefficients have no spread: fit undefined".into()));
    }
    Ok(100.0 * (1.0 - num / den))
}

/// Zero-pads two coefficient sequences to a common number of lags.
pub fn align_lags(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let len = a.len().max(b.len());
    let pad = |v: &[DMatrix<f64>], shape: (usize, usize)| {
        let mut out = v.to_vec();
        out.resize(len, DMatrix::zeros(shape.0, shape.1));
        out
    };
    let shape = a.first().or(b.first()).map_or((0, 0), |g| g.shape());
    (pad(a, shape), pad(b, shape))
}

/// Impulse-response fit of one run; the items are lags, zero-padded to a
/// common length.
pub fn airf(true_coeffs: &[DMatrix<f64>], est_coeffs: &[DMatrix<f64>]) -> Result<f64> {
    let (g, h) = align_lags(true_coeffs, est_coeffs);
    fit_percentage(&g, &h)
}

/// Fit over a set of runs; the items are runs, each run's coefficients
/// concatenated over lags, and `Ḡ` is their mean.
pub fn airf_runs(true_runs: &[Vec<DMatrix<f64>>], est_runs: &[Vec<DMatrix<f64>>]) -> Result<f64> {
    if true_runs.len() != est_runs.len() {
        return Err(Error::DimensionMismatch { expected: true_runs.len(), got: est_runs.len() });
    }
    // one item per run: [G_1 … G_T] side by side
    let concat = |v: &[DMatrix<f64>]| {
        let cols: Vec<_> = v.iter().flat_map(|x| x.column_iter().map(|c| c.into_owned())).collect();
        DMatrix::from_columns(&cols)
    };
    let mut lens = true_runs.iter().chain(est_runs).map(Vec::len);
    let max_len = lens.clone().max().unwrap_or(0);
    if lens.any(|l| l == 0) {
        return Err(Error::InvalidArgument("empty coefficient sequence".into()));
    }
    let pad_to = |v: &[DMatrix<f64>]| {
        let mut out = v.to_vec();
        out.resize(max_len, DMatrix::zeros(v[0].nrows(), v[0].ncols()));
        out
    };
    let (g, h): (Vec<_>, Vec<_>) = true_runs
        .iter()
        .zip(est_runs)
        .map(|(g, h)| (concat(&pad_to(g)), concat(&pad_to(h))))
        .unzip();
    fit_percentage(&g, &h)
}

/// Two-layer network: directed manifest edges plus latent nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub manifest_nodes: Vec<String>,
    pub latent_nodes: Vec<String>,
    /// `(from, to)` labels; `y_j → y_i` when `(i, j)` is in the support.
    pub manifest_edges: Vec<(String, String)>,
    /// Undirected latent-manifest links.
    pub latent_edges: Vec<(String, String)>,
}

#[derive(Serialize)]
struct GraphJson<'a> {
    manifest_nodes: &'a [String],
    latent_nodes: &'a [String],
    edges: Vec<EdgeJson<'a>>,
}

#[derive(Serialize)]
struct EdgeJson<'a> {
    from: &'a str,
    to: &'a str,
    kind: &'static str,
}

impl NetworkGraph {
    /// Every latent node is linked to every manifest node.
    pub fn new(m: usize, support: &BTreeSet<(usize, usize)>, r: usize) -> Self {
        let manifest_nodes: Vec<String> = (1..=m).map(|i| format!("y{i}")).collect();
        let latent_nodes: Vec<String> = (1..=r).map(|q| format!("x{q}")).collect();
        let manifest_edges = support
            .iter()
            .map(|&(i, j)| (manifest_nodes[j].clone(), manifest_nodes[i].clone()))
            .collect();
        let latent_edges = latent_nodes
            .iter()
            .flat_map(|x| manifest_nodes.iter().map(move |y| (x.clone(), y.clone())))
            .collect();
        Self { manifest_nodes, latent_nodes, manifest_edges, latent_edges }
    }

    pub fn from_truth(model: &GroundTruthModel) -> Self {
        Self::new(model.m, &model.sparsity_support, model.n)
    }

    pub fn to_json(&self) -> Result<String> {
        let edges = self
            .manifest_edges
            .iter()
            .map(|(a, b)| EdgeJson { from: a, to: b, kind: "manifest" })
            .chain(self.latent_edges.iter().map(|(a, b)| EdgeJson { from: a, to: b, kind: "latent" }))
            .collect();
        let doc = GraphJson { manifest_nodes: &self.manifest_nodes, latent_nodes: &self.latent_nodes, edges };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// DOT text with the latent nodes on their own rank.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph network {\n  rankdir=TB;\n");
        s.push_str("  subgraph manifest {\n    rank=same;\n");
        for y in &self.manifest_nodes {
            let _ = writeln!(s, "    {y} [shape=box];");
        }
        s.push_str("  }\n");
        if !self.latent_nodes.is_empty() {
            s.push_str("  subgraph latent {\n    rank=min;\n");
            for x in &self.latent_nodes {
                let _ = writeln!(s, "    {x} [shape=circle, style=dashed];");
            }
            s.push_str("  }\n");
        }
        for (a, b) in &self.manifest_edges {
            let _ = writeln!(s, "  {a} -> {b};");
        }
        for (a, b) in &self.latent_edges {
            let _ = writeln!(s, "  {a} -> {b} [dir=both, style=dashed];");
        }
        s.push_str("}\n");
        s
    }
}

/// `(json, dot)` renderings of a network.
pub fn export_network(graph: &NetworkGraph) -> Result<(String, String)> {
    Ok((graph.to_json()?, graph.to_dot()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::Diagnostics;
    use crate::regression::ThetaLayout;
    use crate::sim::{generate_sl_model, simulate, true_predictor};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn estimate(theta_s: DVector<f64>, m: usize, t: usize) -> PredictorEstimate {
        PredictorEstimate {
            theta_l: DVector::zeros(theta_s.len()),
            theta_s,
            layout: ThetaLayout::new(m, t),
            sigma: DMatrix::identity(m, m),
            diagnostics: Diagnostics::default(),
        }
    }

    #[test]
    fn support_cases() {
        let layout = ThetaLayout::new(3, 2);
        assert!(support(&estimate(DVector::zeros(18), 3, 2), 0.05).unwrap().is_empty());
        let mut th = DVector::zeros(18);
        th[layout.offset(2, 0, 1)] = -0.3;
        for thr in [0.0, 0.5, 0.99] {
            let s = support(&estimate(th.clone(), 3, 2), thr).unwrap();
            assert_eq!(s.into_iter().collect::<Vec<_>>(), vec![(2, 0)]);
        }
        assert!(support(&estimate(th, 3, 2), 1.0).is_err());
    }

    #[test]
    fn support_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let th = DVector::from_fn(4 * 4 * 3, |_, _| rng.sample::<f64, _>(StandardNormal) * rng.random::<f64>());
        let e = estimate(th, 4, 3);
        let mut prev = support(&e, 0.0).unwrap();
        for k in 1..20 {
            let cur = support(&e, k as f64 * 0.05).unwrap();
            assert!(cur.is_subset(&prev));
            prev = cur;
        }
    }

    #[test]
    fn ac_cases() {
        let dense = RunComplexity { support_size: 36, r: 0, m: 6, t: 20 };
        let empty = RunComplexity { support_size: 0, r: 0, m: 6, t: 20 };
        assert!((ac(&[dense, dense]).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(ac(&[empty]).unwrap(), 0.0);
        let a = RunComplexity { support_size: 4, r: 1, m: 6, t: 20 };
        assert_eq!(a.parameter_count(), 80 + 120 + 6);
        // linear in the per-run complexities, order-free
        let two = ac(&[a, dense]).unwrap();
        assert!((two - 0.5 * (ac(&[a]).unwrap() + 100.0)).abs() < 1e-12);
        assert_eq!(two, ac(&[dense, a]).unwrap());
        assert!(ac(&[]).is_err());
    }

    #[test]
    fn cod_cases() {
        let model = generate_sl_model(3, 1, 2, 3, 0.6, 1).unwrap();
        let ts = simulate(&model, 200, 2, 30).unwrap();
        let truth = true_predictor(&model);
        let c = cod(&ts, &truth).unwrap();
        assert!(c < 100.0 && c > -100.0);

        // a noiseless AR(1) is predicted perfectly
        let mut y = DMatrix::zeros(50, 1);
        y[(0, 0)] = 1.0;
        for t in 1..50 {
            y[(t, 0)] = 0.9 * y[(t - 1, 0)];
        }
        let ar = TimeSeries::new(y, None).unwrap();
        assert!((cod_from(&ar, &[DMatrix::from_element(1, 1, 0.9)], 1).unwrap() - 100.0).abs() < 1e-12);

        let flat = TimeSeries::new(DMatrix::from_element(20, 2, 3.0), None).unwrap();
        assert!(cod_from(&flat, &[DMatrix::zeros(2, 2)], 1).is_err());
        assert!(cod_from(&flat, &[DMatrix::zeros(2, 2)], 20).is_err());
    }

    #[test]
    fn cod_zero_for_mean_predictor_over_full_range() {
        // with ȳ taken over the scored samples, ŷ ≡ ȳ scores exactly 0
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut vals = DMatrix::from_fn(101, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mean = vals.rows(1, 100).row_mean();
        for mut row in vals.row_iter_mut() {
            row -= &mean;
        }
        vals.row_mut(0).fill(0.0);
        let ts = TimeSeries::new(vals, None).unwrap();
        // whole-set mean equals the scored mean because row 0 is zero and the rest are centered
        let v = cod_from(&ts, &[DMatrix::zeros(2, 2)], 1).unwrap();
        assert!(v.abs() < 1e-10, "{v}");
    }

    #[test]
    fn airf_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g: Vec<DMatrix<f64>> = (0..4).map(|_| DMatrix::from_fn(3, 3, |_, _| rng.sample(StandardNormal))).collect();
        assert!((airf(&g, &g).unwrap() - 100.0).abs() < 1e-12);
        let mean = g.iter().fold(DMatrix::zeros(3, 3), |a, x| a + x) / 4.0;
        assert!(airf(&g, &vec![mean.clone(); 4]).unwrap().abs() < 1e-12);
        // shorter estimates are zero-padded
        assert!(airf(&g, &g[..2]).unwrap() < 100.0);
        assert!(airf(&g, &[DMatrix::zeros(2, 2)]).is_err());

        let runs: Vec<Vec<DMatrix<f64>>> = (0..5).map(|_| g.iter().map(|x| x * rng.random::<f64>()).collect()).collect();
        assert!((airf_runs(&runs, &runs).unwrap() - 100.0).abs() < 1e-12);
        let noisy: Vec<Vec<DMatrix<f64>>> = runs.iter().map(|r| r.iter().map(|x| x.add_scalar(0.1)).collect()).collect();
        let a = airf_runs(&runs, &noisy).unwrap();
        let mut rev_t = runs.clone();
        let mut rev_e = noisy.clone();
        rev_t.reverse();
        rev_e.reverse();
        assert!((a - airf_runs(&rev_t, &rev_e).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn network_export() {
        let g = NetworkGraph::new(4, &BTreeSet::new(), 0);
        assert_eq!(g.manifest_nodes.len(), 4);
        assert!(g.manifest_edges.is_empty() && g.latent_edges.is_empty());

        let model = generate_sl_model(6, 1, 4, 20, 0.8, 3).unwrap();
        let net = NetworkGraph::from_truth(&model);
        assert_eq!((net.manifest_nodes.len(), net.latent_nodes.len(), net.manifest_edges.len()), (6, 1, 4));
        assert!(net.manifest_edges.iter().all(|(a, b)| a != b));

        let (json, dot) = export_network(&net).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["manifest_nodes"].as_array().unwrap().len(), 6);
        assert_eq!(v["edges"].as_array().unwrap().len(), 4 + 6);

        assert!(dot_parser::ast::Graph::try_from(dot.as_str()).is_ok(), "{dot}");
        assert!(dot_parser::ast::Graph::try_from(NetworkGraph::new(2, &BTreeSet::new(), 0).to_dot().as_str()).is_ok());
        assert!(dot_parser::ast::Graph::try_from("digraph { y1 -> ; }").is_err());
        assert_eq!(dot.matches(" -> ").count(), 4 + 6);
    }
}
