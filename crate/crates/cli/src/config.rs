//! Run configuration: `key = value` files overlaid by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use latentnet::error::{Error, Result};
use latentnet::experiment::{ExperimentConfig, IdentifyOptions};
use latentnet::hyperloop::AlgoOptions;
use latentnet::metrics::DEFAULT_THRESHOLD;
use latentnet::sgp::SgpOptions;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Dot,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "dot" => Ok(Format::Dot),
            other => Err(Error::InvalidArgument(format!("unknown format {other:?} (json, csv, dot)"))),
        }
    }
}

/// Every setting a subcommand may need. Unset fields fall back to defaults
/// in [`RunConfig::resolve`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub nnz: Option<usize>,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    #[serde(rename = "T_true")]
    pub t_true: Option<usize>,
    #[serde(rename = "N")]
    pub n_samples: Option<usize>,
    pub decay: Option<f64>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub threshold: Option<f64>,
    pub rmax: Option<usize>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
}

/// Seeds as `a..b` (half open) or a comma-separated list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::InvalidArgument(format!("bad seed list {s:?}; use a..b or a,b,c"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b <= a {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::InvalidArgument(format!("bad value {v:?} for {key}")))
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), lineno).is_some() {
                return Err(Error::InvalidArgument(format!("line {}: duplicate key {k}", lineno + 1)));
            }
            match k {
                "m" => cfg.m = Some(parse_value(k, v)?),
                "n" => cfg.n = Some(parse_value(k, v)?),
                "nnz" => cfg.nnz = Some(parse_value(k, v)?),
                "T" => cfg.t = Some(parse_value(k, v)?),
                "T_true" => cfg.t_true = Some(parse_value(k, v)?),
                "N" => cfg.n_samples = Some(parse_value(k, v)?),
                "decay" => cfg.decay = Some(parse_value(k, v)?),
                "seed" => cfg.seed = Some(parse_value(k, v)?),
                "seeds" => cfg.seeds = Some(parse_seeds(v)?),
                "threshold" => cfg.threshold = Some(parse_value(k, v)?),
                "rmax" => cfg.rmax = Some(parse_value(k, v)?),
                "tol" => cfg.tol = Some(parse_value(k, v)?),
                "max_iter" => cfg.max_iter = Some(parse_value(k, v)?),
                "jobs" => cfg.jobs = Some(parse_value(k, v)?),
                "out" => cfg.out = Some(PathBuf::from(v)),
                "format" => cfg.format = Some(v.parse()?),
                other => return Err(Error::InvalidArgument(format!("line {}: unknown key {other}", lineno + 1))),
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_kv(&text)
    }

    /// Fields set in `flags` win over `self`.
    pub fn overlay(self, flags: RunConfig) -> RunConfig {
        RunConfig {
            m: flags.m.or(self.m),
            n: flags.n.or(self.n),
            nnz: flags.nnz.or(self.nnz),
            t: flags.t.or(self.t),
            t_true: flags.t_true.or(self.t_true),
            n_samples: flags.n_samples.or(self.n_samples),
            decay: flags.decay.or(self.decay),
            seed: flags.seed.or(self.seed),
            seeds: flags.seeds.or(self.seeds),
            threshold: flags.threshold.or(self.threshold),
            rmax: flags.rmax.or(self.rmax),
            tol: flags.tol.or(self.tol),
            max_iter: flags.max_iter.or(self.max_iter),
            jobs: flags.jobs.or(self.jobs),
            out: flags.out.or(self.out),
            format: flags.format.or(self.format),
        }
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let t = self.t.unwrap_or(20);
        let sgp = SgpOptions {
            tol: self.tol.unwrap_or(SgpOptions::default().tol),
            max_iter: self.max_iter.unwrap_or(SgpOptions::default().max_iter),
            ..SgpOptions::default()
        };
        if sgp.tol.is_nan() || sgp.tol <= 0.0 || sgp.max_iter == 0 {
            return Err(Error::InvalidArgument("tol and max_iter must be positive".into()));
        }
        let threshold = self.threshold.unwrap_or(DEFAULT_THRESHOLD);
        if !(0.0..1.0).contains(&threshold) {
            return Err(Error::InvalidArgument(format!("threshold {threshold} not in [0,1)")));
        }
        let identify = IdentifyOptions {
            t,
            threshold,
            arx_order: None,
            algo: AlgoOptions { sgp, r_max: self.rmax, ..AlgoOptions::default() },
        };
        let experiment = ExperimentConfig {
            m: self.m.unwrap_or(6),
            n: self.n.unwrap_or(1),
            nnz: self.nnz.unwrap_or(4),
            t_true: self.t_true.unwrap_or(20),
            decay: self.decay.unwrap_or(0.8),
            n_samples: self.n_samples.unwrap_or(500),
            identify,
        };
        let seeds = match (&self.seeds, self.seed) {
            (Some(s), _) => s.clone(),
            (None, Some(s)) => vec![s],
            (None, None) => vec![0],
        };
        if seeds.is_empty() {
            return Err(Error::InvalidArgument("empty seed list".into()));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(Error::InvalidArgument("duplicate seeds".into()));
        }
        Ok(Resolved {
            experiment,
            seeds,
            jobs: self.jobs.unwrap_or(0),
            out: self.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            format: self.format.unwrap_or(Format::Json),
        })
    }
}

/// Fully defaulted configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub experiment: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
    pub out: PathBuf,
    pub format: Format,
}

impl Resolved {
    /// SHA-256 of the canonical JSON of the experiment settings, first 16
    /// hex digits. Seeds, output location and format do not enter the hash.
    pub fn config_hash(&self) -> String {
        config_hash(&self.experiment)
    }
}

pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
