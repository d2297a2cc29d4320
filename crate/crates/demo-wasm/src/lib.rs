//! Browser bindings. Each export returns JSON (or a flat array) so the page
//! needs no glue beyond `JSON.parse`.

use latentnet::error::Result;
use latentnet::experiment::{run_seed, simulate_run, ExperimentConfig, IdentifyOptions};
use latentnet::kernel::tc_kernel;
use latentnet::metrics::NetworkGraph;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Samples of the simulated series sent to the page.
pub const PLOT_SAMPLES: usize = 200;

fn config(m: usize, n: usize, nnz: usize, n_samples: usize, t: usize) -> ExperimentConfig {
    ExperimentConfig { m, n, nnz, t_true: t, decay: 0.8, n_samples, identify: IdentifyOptions::new(t) }
}

fn network_value(net: &NetworkGraph) -> Result<Value> {
    Ok(serde_json::from_str(&net.to_json()?)?)
}

/// True network of a random S+L model and the first samples of its
/// training series, one array per channel.
pub fn simulate_json(m: usize, n: usize, nnz: usize, t: usize, seed: u64) -> Result<String> {
    let run = simulate_run(&config(m, n, nnz, PLOT_SAMPLES.max(m * t + m + 1), t), seed)?;
    let shown = run.train.len().min(PLOT_SAMPLES);
    let series: Vec<Vec<f64>> =
        (0..m).map(|j| (0..shown).map(|k| run.train.values[(k, j)]).collect()).collect();
    Ok(json!({
        "network": network_value(&NetworkGraph::from_truth(&run.model))?,
        "series": series,
        "spectral_radius": run.model.spectral_radius(),
    })
    .to_string())
}

/// `T×T` TC kernel, row major.
pub fn tc_kernel_values(c: f64, lambda: f64, t: usize) -> Result<Vec<f64>> {
    let k = tc_kernel(c, lambda, t)?;
    Ok(k.matrix().transpose().as_slice().to_vec())
}

/// Simulates, identifies and scores one run.
pub fn identify_json(m: usize, n: usize, nnz: usize, n_samples: usize, t: usize, seed: u64) -> Result<String> {
    let cfg = config(m, n, nnz, n_samples, t);
    let sim = simulate_run(&cfg, seed)?;
    let (metrics, ident) = run_seed(&cfg, 0, seed)?;
    let ell: Vec<Value> =
        ident.report.per_rank.iter().map(|r| json!({ "r": r.r, "ell": r.ell_best })).collect();
    Ok(json!({
        "truth": network_value(&NetworkGraph::from_truth(&sim.model))?,
        "estimate": network_value(&ident.network)?,
        "selected_r": metrics.selected_r,
        "support_hits": metrics.support_hits,
        "true_edges": sim.model.sparsity_support.len(),
        "cod": { "sl": metrics.cod_sl, "tc": metrics.cod_tc, "true": metrics.cod_true },
        "airf": { "sl": metrics.airf_sl, "tc": metrics.airf_tc },
        "ell_per_rank": ell,
        "ktilde": { "c": ident.hyper.c, "lambda": ident.hyper.lambda },
    })
    .to_string())
}

fn js(e: latentnet::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn simulate(m: usize, n: usize, nnz: usize, t: usize, seed: u32) -> std::result::Result<String, JsError> {
    simulate_json(m, n, nnz, t, seed.into()).map_err(js)
}

#[wasm_bindgen(js_name = tcKernel)]
pub fn tc_kernel_js(c: f64, lambda: f64, t: usize) -> std::result::Result<Vec<f64>, JsError> {
    tc_kernel_values(c, lambda, t).map_err(js)
}

#[wasm_bindgen]
pub fn identify(m: usize, n: usize, nnz: usize, n_samples: usize, t: usize, seed: u32) -> std::result::Result<String, JsError> {
    identify_json(m, n, nnz, n_samples, t, seed.into()).map_err(js)
}
