//! The four subcommands. Each returns what it wrote so callers and tests can
//! inspect results without re-reading files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use latentnet::error::{Error, Result};
use latentnet::estimator::PredictorEstimate;
use latentnet::experiment::{identify, run_seed, simulate_run, summarize, Identification, RunMetrics, Summary};
use latentnet::io::{format_f64, read_time_series, write_coefficients, write_time_series};
use latentnet::metrics::{airf, cod_from};
use latentnet::sim::{true_predictor, GroundTruthModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, Format, Resolved};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn provenance_line(hash: &str, seed: Option<u64>) -> String {
    match seed {
        Some(s) => format!("# config_hash={hash} seed={s}\n"),
        None => format!("# config_hash={hash}\n"),
    }
}

/// Model file written by `simulate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub config_hash: String,
    pub seed: u64,
    pub model: GroundTruthModel,
}

pub struct SimulateOutput {
    pub seed: u64,
    pub model: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
}

/// Writes `seed_<s>/{model.json, train.csv, test.csv}` for every seed.
pub fn cmd_simulate(cfg: &Resolved) -> Result<Vec<SimulateOutput>> {
    cfg.experiment.validate()?;
    let hash = cfg.config_hash();
    cfg.seeds
        .iter()
        .map(|&seed| {
            let run = simulate_run(&cfg.experiment, seed)?;
            let dir = cfg.out.join(format!("seed_{seed}"));
            let out = SimulateOutput {
                seed,
                model: dir.join("model.json"),
                train: dir.join("train.csv"),
                test: dir.join("test.csv"),
            };
            write_json(&out.model, &ModelFile { config_hash: hash.clone(), seed, model: run.model })?;
            for (path, ts) in [(&out.train, &run.train), (&out.test, &run.test)] {
                let mut w = create(path)?;
                w.write_all(provenance_line(&hash, Some(seed)).as_bytes())?;
                write_time_series(ts, &mut w)?;
            }
            Ok(out)
        })
        .collect()
}

/// Estimate file written by `identify` and read by `evaluate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateFile {
    pub config_hash: String,
    pub seed: Option<u64>,
    pub source: PathBuf,
    pub identification: Identification,
}

pub struct IdentifyOutput {
    pub identification: Identification,
    pub files: Vec<PathBuf>,
}

/// Runs the identification pipeline on one CSV and writes `estimate.json`,
/// `report.json` and the network (and coefficient tables for `csv`).
pub fn cmd_identify(train: &Path, cfg: &Resolved) -> Result<IdentifyOutput> {
    let ts = read_time_series(File::open(train).map_err(|e| {
        Error::InvalidArgument(format!("cannot open {}: {e}", train.display()))
    })?)?;
    let opts = &cfg.experiment.identify;
    let hash = config_hash(opts);
    let seed = cfg.seeds.first().copied().filter(|_| cfg.seeds.len() == 1);
    let ident = identify(&ts, opts)?;
    let out = &cfg.out;
    let mut files = Vec::new();

    let estimate_path = out.join("estimate.json");
    write_json(
        &estimate_path,
        &EstimateFile { config_hash: hash.clone(), seed, source: train.to_path_buf(), identification: ident.clone() },
    )?;
    files.push(estimate_path);

    #[derive(Serialize)]
    struct ReportFile<'a> {
        config_hash: &'a str,
        seed: Option<u64>,
        #[serde(flatten)]
        report: &'a latentnet::hyperloop::AlgoReport,
        ell: f64,
        ktilde: (f64, f64),
    }
    let report_path = out.join("report.json");
    write_json(
        &report_path,
        &ReportFile { config_hash: &hash, seed, report: &ident.report, ell: ident.ell, ktilde: (ident.hyper.c, ident.hyper.lambda) },
    )?;
    files.push(report_path);

    match cfg.format {
        Format::Json => {
            let path = out.join("network.json");
            let mut w = create(&path)?;
            w.write_all(ident.network.to_json()?.as_bytes())?;
            w.write_all(b"\n")?;
            files.push(path);
        }
        Format::Dot => {
            let path = out.join("network.dot");
            let mut w = create(&path)?;
            w.write_all(format!("// config_hash={hash}\n").as_bytes())?;
            w.write_all(ident.network.to_dot().as_bytes())?;
            files.push(path);
        }
        Format::Csv => {
            let est = &ident.estimate;
            for (name, coeffs) in [
                ("coefficients.csv", est.coefficients()),
                ("coefficients_sparse.csv", est.sparse_coefficients()),
                ("coefficients_lowrank.csv", est.lowrank_coefficients()),
            ] {
                let path = out.join(name);
                let mut w = create(&path)?;
                w.write_all(provenance_line(&hash, seed).as_bytes())?;
                write_coefficients(&coeffs, &mut w)?;
                files.push(path);
            }
        }
    }
    Ok(IdentifyOutput { identification: ident, files })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub predictor: String,
    pub cod: f64,
    /// Present when the true model is known.
    pub airf: Option<f64>,
}

/// Scores the S+L and TC estimates (and the true predictor when a model
/// file is given) on a test series. All rows use the same test samples.
pub fn cmd_evaluate(estimate: &Path, test: &Path, truth: Option<&Path>, cfg: &Resolved) -> Result<Vec<EvalRow>> {
    let est: EstimateFile = read_json(estimate)?;
    let ts = read_time_series(File::open(test).map_err(|e| {
        Error::InvalidArgument(format!("cannot open {}: {e}", test.display()))
    })?)?;
    let model: Option<ModelFile> = truth.map(read_json).transpose()?;
    let truth_est: Option<PredictorEstimate> = model.as_ref().map(|f| true_predictor(&f.model));
    let t_est = est.identification.estimate.layout.t;
    let start = t_est.max(truth_est.as_ref().map_or(0, |p| p.layout.t));
    let true_g = truth_est.as_ref().map(PredictorEstimate::coefficients);

    let mut rows = Vec::new();
    let mut push = |name: &str, g: Vec<_>| -> Result<()> {
        let airf = match &true_g {
            Some(tg) => Some(airf(tg, &g)?),
            None => None,
        };
        rows.push(EvalRow { predictor: name.into(), cod: cod_from(&ts, &g, start)?, airf });
        Ok(())
    };
    push("sl", est.identification.estimate.coefficients())?;
    push("tc", est.identification.tc_estimate.coefficients())?;
    if let Some(tg) = &true_g {
        push("true", tg.clone())?;
    }

    let path = cfg.out.join("metrics.csv");
    let mut w = create(&path)?;
    w.write_all(provenance_line(&est.config_hash, est.seed).as_bytes())?;
    writeln!(w, "predictor,cod,airf")?;
    for r in &rows {
        writeln!(w, "{},{},{}", r.predictor, format_f64(r.cod), r.airf.map(format_f64).unwrap_or_default())?;
    }
    w.flush()?;
    Ok(rows)
}

/// Per-seed checkpoint written by `montecarlo`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub seed: u64,
    pub metrics: RunMetrics,
    pub selected_r: usize,
    pub support: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloOutput {
    pub config_hash: String,
    pub runs: Vec<RunMetrics>,
    pub summary: Summary,
    /// Seeds whose checkpoint was reused.
    #[serde(skip)]
    pub resumed: Vec<u64>,
}

fn checkpoint_path(out: &Path, seed: u64) -> PathBuf {
    out.join("runs").join(format!("seed_{seed}.json"))
}

fn load_checkpoint(path: &Path, hash: &str) -> Option<Checkpoint> {
    let cp: Checkpoint = read_json(path).ok()?;
    (cp.config_hash == hash).then_some(cp)
}

/// Runs every seed (in parallel), reusing matching checkpoints, and writes
/// `metrics.csv`, `boxplot.csv` and `summary.json`.
pub fn cmd_montecarlo(cfg: &Resolved) -> Result<MonteCarloOutput> {
    cfg.experiment.validate()?;
    let hash = cfg.config_hash();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    let results: Vec<Result<(Checkpoint, bool)>> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .enumerate()
            .map(|(run_id, &seed)| {
                let path = checkpoint_path(&cfg.out, seed);
                if let Some(mut cp) = load_checkpoint(&path, &hash) {
                    cp.metrics.run_id = run_id;
                    return Ok((cp, true));
                }
                let (metrics, ident) = run_seed(&cfg.experiment, run_id, seed)?;
                let cp = Checkpoint {
                    config_hash: hash.clone(),
                    seed,
                    selected_r: metrics.selected_r,
                    metrics,
                    support: ident.support.into_iter().collect(),
                };
                write_json(&path, &cp)?;
                Ok((cp, false))
            })
            .collect()
    });

    let mut runs = Vec::with_capacity(results.len());
    let mut resumed = Vec::new();
    for r in results {
        let (cp, reused) = r?;
        if reused {
            resumed.push(cp.seed);
        }
        runs.push(cp.metrics);
    }
    let summary = summarize(&runs)?;

    let mut w = create(&cfg.out.join("metrics.csv"))?;
    w.write_all(provenance_line(&hash, None).as_bytes())?;
    writeln!(w, "run_id,seed,cod_sl,cod_tc,cod_true,airf_sl,airf_tc,ac_contrib,selected_r,support_size,support_hits")?;
    for r in &runs {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.seed,
            format_f64(r.cod_sl),
            format_f64(r.cod_tc),
            format_f64(r.cod_true),
            format_f64(r.airf_sl),
            format_f64(r.airf_tc),
            format_f64(r.ac_contrib),
            r.selected_r,
            r.support_size,
            r.support_hits
        )?;
    }
    w.flush()?;

    let mut w = create(&cfg.out.join("boxplot.csv"))?;
    w.write_all(provenance_line(&hash, None).as_bytes())?;
    writeln!(w, "run_id,seed,metric,predictor,value")?;
    for r in &runs {
        for (metric, predictor, v) in [
            ("cod", "sl", r.cod_sl),
            ("cod", "tc", r.cod_tc),
            ("cod", "true", r.cod_true),
            ("airf", "sl", r.airf_sl),
            ("airf", "tc", r.airf_tc),
            ("ac", "sl", r.ac_contrib),
        ] {
            writeln!(w, "{},{},{metric},{predictor},{}", r.run_id, r.seed, format_f64(v))?;
        }
    }
    w.flush()?;

    #[derive(Serialize)]
    struct SummaryFile<'a> {
        config_hash: &'a str,
        seeds: &'a [u64],
        config: &'a latentnet::experiment::ExperimentConfig,
        summary: &'a Summary,
    }
    write_json(
        &cfg.out.join("summary.json"),
        &SummaryFile { config_hash: &hash, seeds: &cfg.seeds, config: &cfg.experiment, summary: &summary },
    )?;
    Ok(MonteCarloOutput { config_hash: hash, runs, summary, resumed })
}
