//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::{config, read_aggregates, run_compare, slug, write_compare, write_plots, Experiment, ExperimentConfig};
use crate::error::{Error, Result};
use crate::fit::fit_problem;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "biasopt", version, about = "Stochastic optimization with bias-controllable gradient oracles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate bias and variance curves and write a bound-model file.
    Fit(Common),
    /// Run one replication of one algorithm.
    Run {
        #[command(flatten)]
        common: Common,
        /// Label of the algorithm; the first one when omitted.
        #[arg(long)]
        algorithm: Option<String>,
        /// Replication index, which selects the random stream.
        #[arg(long, default_value_t = 0)]
        replication: usize,
    },
    /// Run every algorithm and replication, aggregate, and plot.
    Compare(Common),
    /// Redraw the charts of a compare output directory.
    Plot {
        /// Directory written by `compare`.
        #[arg(long)]
        input: PathBuf,
        /// Chart directory; defaults to `<input>/plots`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    replications: Option<usize>,
    /// Worker threads; falls back to BOB_THREADS, then to the number of cores.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.replications {
            cfg.replications = r;
        }
        let base = self.config.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    fn out_dir(&self, cfg: &ExperimentConfig, base: &Path) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.output.as_ref().map(|o| config::resolve(base, o)))
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    fn threads(&self) -> Result<Option<usize>> {
        if let Some(n) = self.threads {
            return Ok(Some(n));
        }
        match std::env::var("BOB_THREADS") {
            Ok(v) if !v.trim().is_empty() => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| Error::config(format!("BOB_THREADS must be a positive integer, got `{v}`"))),
            _ => Ok(None),
        }
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Fit(common) => {
            let (cfg, base) = common.load()?;
            let problem = cfg.build_problem(&base)?;
            let center = cfg.initial_point(problem.dimension());
            let report = fit_problem(problem.as_ref(), &center, &cfg.fit, cfg.seed)?;
            let out = common.out_dir(&cfg, &base);
            mkdir(&out)?;
            let model_path = out.join("bound_model.json");
            let json = serde_json::to_string_pretty(&report).expect("fit report serializes");
            std::fs::write(&model_path, json + "\n").map_err(|e| Error::io(&model_path, e))?;
            report.curve.write_csv(&out.join("bias_curve.csv"))?;
            println!(
                "{:?} fit a={} rate={} goodness={} -> {}",
                report.fit.family,
                report.fit.a,
                report.fit.rate,
                report.fit.goodness,
                model_path.display()
            );
            Ok(EXIT_OK)
        }
        Command::Run {
            common,
            algorithm,
            replication,
        } => {
            let (cfg, base) = common.load()?;
            let out = common.out_dir(&cfg, &base);
            let exp = Experiment::new(cfg, base)?;
            let a = match &algorithm {
                Some(label) => exp.find(label)?,
                None => 0,
            };
            let label = exp.labels()[a].to_string();
            let t = exp.run_cell(a, replication)?;
            mkdir(&out)?;
            let path = out.join(format!("{}_r{replication:03}.csv", slug(&label)));
            super::report::write_trajectory_csv(&path, &t)?;
            let last = t.records.last();
            println!(
                "{label}: {} iterations, samples={} eta={} etaB={}, final stationarity_sq={} -> {}",
                t.records.len(),
                t.ledger.totals().samples,
                t.ledger.totals().eta,
                t.ledger.totals().eta_b,
                last.map_or(f64::NAN, |r| r.stationarity_sq),
                path.display()
            );
            Ok(EXIT_OK)
        }
        Command::Compare(common) => {
            let (cfg, base) = common.load()?;
            let out = common.out_dir(&cfg, &base);
            let threads = common.threads()?;
            let exp = Experiment::new(cfg, base)?;
            let result = run_compare(&exp, threads)?;
            write_compare(&result, &out)?;
            for (agg, m) in result.aggregates.iter().zip(&result.meta.algorithms) {
                let last = agg.len().saturating_sub(1);
                println!(
                    "{}: {}/{} replications, final mean stationarity_sq={}, mean etaB={}",
                    m.label,
                    m.completed,
                    m.requested,
                    agg.stationarity_sq.mean.get(last).copied().unwrap_or(f64::NAN),
                    agg.eta_b_cum.get(last).copied().unwrap_or(f64::NAN)
                );
            }
            println!("wrote {}", out.display());
            if result.failures() > 0 {
                eprintln!("{} cells failed; see run_meta.json", result.failures());
                return Ok(EXIT_RUNTIME);
            }
            Ok(EXIT_OK)
        }
        Command::Plot { input, out } => {
            let aggs = read_aggregates(&input)?;
            let dir = out.unwrap_or_else(|| input.join("plots"));
            write_plots(&aggs, &dir)?;
            println!("wrote {}", dir.display());
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args` (including the program name) and runs the command, returning the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
