use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latentnet::error::Result;
use latentnet_cli::config::parse_seeds;
use latentnet_cli::{cmd_evaluate, cmd_identify, cmd_montecarlo, cmd_simulate, exit_code, Format, RunConfig};

#[derive(Parser)]
#[command(name = "latentnet", version, about = "Identify sparse plus low-rank Granger networks from time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw random S+L models and write model JSON plus train/test CSVs per seed.
    Simulate(Common),
    /// Estimate the S+L predictor and network from one CSV.
    Identify {
        /// Identification data, `t,y1,...,ym` CSV.
        #[arg(long)]
        train: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score an estimate on test data, optionally against the true model.
    Evaluate {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// `model.json` from `simulate`.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Seeded simulate → identify → evaluate runs with box-plot summaries.
    Montecarlo(Common),
}

#[derive(Args, Default)]
struct Common {
    /// `key = value` file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of manifest variables.
    #[arg(long)]
    m: Option<usize>,
    /// Latent dimension of simulated models.
    #[arg(long)]
    n: Option<usize>,
    /// Manifest edges in simulated models.
    #[arg(long)]
    nnz: Option<usize>,
    /// Predictor truncation length.
    #[arg(long = "T")]
    t: Option<usize>,
    /// Impulse-response length of simulated models.
    #[arg(long = "T-true")]
    t_true: Option<usize>,
    /// Samples per data set.
    #[arg(long = "N")]
    n_samples: Option<usize>,
    /// Per-lag decay of simulated impulse responses, in (0,1).
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// `a..b` or `a,b,c`.
    #[arg(long)]
    seeds: Option<String>,
    /// Relative support threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Largest latent rank tried (default m).
    #[arg(long)]
    rmax: Option<usize>,
    /// Optimizer stopping tolerance on the projected gradient.
    #[arg(long)]
    tol: Option<f64>,
    /// Optimizer iteration cap per minimization.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Worker threads for `montecarlo` (0 = automatic).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Network/coefficient output: json, csv or dot.
    #[arg(long)]
    format: Option<String>,
}

impl Common {
    fn into_config(self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let flags = RunConfig {
            m: self.m,
            n: self.n,
            nnz: self.nnz,
            t: self.t,
            t_true: self.t_true,
            n_samples: self.n_samples,
            decay: self.decay,
            seed: self.seed,
            seeds: self.seeds.as_deref().map(parse_seeds).transpose()?,
            threshold: self.threshold,
            rmax: self.rmax,
            tol: self.tol,
            max_iter: self.max_iter,
            jobs: self.jobs,
            out: self.out,
            format: self.format.as_deref().map(str::parse::<Format>).transpose()?,
        };
        Ok(file.overlay(flags))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(common) => {
            let cfg = common.into_config()?.resolve()?;
            for out in cmd_simulate(&cfg)? {
                println!("seed {}: {}", out.seed, out.model.parent().unwrap_or(&cfg.out).display());
            }
        }
        Command::Identify { train, common } => {
            let cfg = common.into_config()?.resolve()?;
            let out = cmd_identify(&train, &cfg)?;
            let id = &out.identification;
            println!(
                "selected r = {}, {} manifest edges, ℓ = {:.6}",
                id.selected_rank(),
                id.support.len(),
                id.ell
            );
            for f in out.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Evaluate { estimate, test, truth, common } => {
            let cfg = common.into_config()?.resolve()?;
            for row in cmd_evaluate(&estimate, &test, truth.as_deref(), &cfg)? {
                match row.airf {
                    Some(a) => println!("{:>5}: COD {:8.3}  AIRF {:8.3}", row.predictor, row.cod, a),
                    None => println!("{:>5}: COD {:8.3}", row.predictor, row.cod),
                }
            }
        }
        Command::Montecarlo(common) => {
            let cfg = common.into_config()?.resolve()?;
            let out = cmd_montecarlo(&cfg)?;
            let s = &out.summary;
            println!("config {}, {} runs ({} resumed)", out.config_hash, s.runs, out.resumed.len());
            println!("AC {:.2}  rank counts {:?}", s.ac, s.rank_counts);
            println!("median COD  SL {:.2}  TC {:.2}  TRUE {:.2}", s.cod_sl.median, s.cod_tc.median, s.cod_true.median);
            println!("median AIRF SL {:.2}  TC {:.2}", s.airf_sl.median, s.airf_tc.median);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

