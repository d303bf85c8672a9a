//! Replicated experiments: configuration, the compare protocol, CSV and SVG output.
//!
//! Cell `(a, r)` (algorithm `a`, replication `r`) runs with key = master seed
//! and stream `(a << 32) | r`. Cells run on a rayon pool and return their
//! trajectories; all files are written afterwards by the caller's thread, so
//! the output does not depend on the thread count.

pub mod cli;
pub mod config;
pub mod plot;
pub mod report;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{AlgorithmConfig, BoundsConfig, ExperimentConfig, ProblemConfig, ResolvedRun};
pub use report::{aggregate, AggregateReport, Axis, CsvRow, Series, TRAJECTORY_HEADER};

use crate::algorithms::Trajectory;
use crate::error::{Error, Result};
use crate::oracle::{BoundModel, BoundSource, ProblemOracle};
use crate::rng::cell_stream;

pub struct Experiment {
    pub config: ExperimentConfig,
    /// Directory relative paths in the config resolve against.
    pub base_dir: PathBuf,
    pub problem: Box<dyn ProblemOracle>,
    pub model: BoundModel,
    pub runs: Vec<ResolvedRun>,
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self> {
        let config = ExperimentConfig::load(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(config, base)
    }

    pub fn new(config: ExperimentConfig, base_dir: PathBuf) -> Result<Self> {
        config.validate()?;
        let problem = config.build_problem(&base_dir)?;
        let model = config.bound_model(&base_dir)?;
        let x0 = config.initial_point(problem.dimension());
        let lipschitz = config.lipschitz;
        let runs = config
            .algorithms
            .iter()
            .map(|a| a.resolve(&x0, lipschitz))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            base_dir,
            problem,
            model,
            runs,
        })
    }

    pub fn labels(&self) -> Vec<&str> {
        self.config.algorithms.iter().map(|a| a.label()).collect()
    }

    /// Index of the algorithm labelled `label`.
    pub fn find(&self, label: &str) -> Result<usize> {
        self.labels()
            .iter()
            .position(|l| *l == label)
            .ok_or_else(|| Error::config(format!("no algorithm labelled `{label}`")))
    }

    pub fn run_cell(&self, algorithm: usize, replication: usize) -> Result<Trajectory> {
        let stream = cell_stream(algorithm as u32, replication as u32);
        self.runs[algorithm].execute(self.problem.as_ref(), &self.model, self.config.seed, stream)
    }
}

#[derive(Debug)]
pub struct CellOutcome {
    pub algorithm: usize,
    pub replication: usize,
    pub result: std::result::Result<Trajectory, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub replication: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmMeta {
    pub label: String,
    pub algorithm: String,
    pub aggregate_file: String,
    pub run_files: Vec<String>,
    pub completed: usize,
    pub requested: usize,
    pub complete: bool,
    pub failures: Vec<CellFailure>,
    /// Stepsize of the gradient mapping in the stationarity column, when composite.
    pub report_alpha: Option<f64>,
    /// Mean number of iterations run at the level cap.
    pub mean_saturated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub version: u32,
    pub seed: u64,
    pub replications: usize,
    pub problem: String,
    pub dimension: usize,
    pub bounds: BoundModel,
    pub bounds_source: BoundSource,
    /// How the stationarity column was computed.
    pub stationarity_reference: String,
    pub objective_exact: bool,
    pub algorithms: Vec<AlgorithmMeta>,
    pub config: ExperimentConfig,
}

pub struct CompareOutput {
    pub cells: Vec<CellOutcome>,
    pub aggregates: Vec<AggregateReport>,
    pub meta: RunMeta,
}

impl CompareOutput {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.result.is_err()).count()
    }

    pub fn trajectory(&self, algorithm: usize, replication: usize) -> Option<&Trajectory> {
        self.cells
            .iter()
            .find(|c| c.algorithm == algorithm && c.replication == replication)
            .and_then(|c| c.result.as_ref().ok())
    }
}

/// File-name-safe version of a label.
pub fn slug(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    s.trim_matches('_').to_string()
}

fn run_file(a: usize, label: &str, r: usize) -> String {
    format!("runs/{a:02}_{}_r{r:03}.csv", slug(label))
}

fn aggregate_file(a: usize, label: &str) -> String {
    format!("aggregate_{a:02}_{}.csv", slug(label))
}

/// Runs every `(algorithm, replication)` cell on `threads` workers (rayon's
/// default when `None`) and aggregates the completed ones.
pub fn run_compare(exp: &Experiment, threads: Option<usize>) -> Result<CompareOutput> {
    let reps = exp.config.replications;
    let n_alg = exp.runs.len();
    let cells: Vec<(usize, usize)> = (0..n_alg).flat_map(|a| (0..reps).map(move |r| (a, r))).collect();
    let work = || -> Vec<CellOutcome> {
        cells
            .par_iter()
            .map(|&(a, r)| CellOutcome {
                algorithm: a,
                replication: r,
                result: exp.run_cell(a, r).map_err(|e| e.to_string()),
            })
            .collect()
    };
    let outcomes = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::config(format!("cannot build a pool of {n} threads: {e}")))?
            .install(work),
        None => work(),
    };

    let mut aggregates = Vec::with_capacity(n_alg);
    let mut metas = Vec::with_capacity(n_alg);
    let mut objective_exact = true;
    for (a, label) in exp.labels().into_iter().enumerate() {
        let mine: Vec<&CellOutcome> = outcomes.iter().filter(|c| c.algorithm == a).collect();
        let done: Vec<&Trajectory> = mine.iter().filter_map(|c| c.result.as_ref().ok()).collect();
        let failures: Vec<CellFailure> = mine
            .iter()
            .filter_map(|c| {
                c.result.as_ref().err().map(|e| CellFailure {
                    replication: c.replication,
                    error: e.clone(),
                })
            })
            .collect();
        for f in &failures {
            log::warn!("{label} replication {} failed: {}", f.replication, f.error);
        }
        let rows: Vec<Vec<CsvRow>> = done.iter().map(|t| report::trajectory_rows(t)).collect();
        let agg = aggregate(label, &rows, reps)?;
        objective_exact &= done.iter().all(|t| t.objective_exact);
        metas.push(AlgorithmMeta {
            label: label.to_string(),
            algorithm: done.first().map_or_else(String::new, |t| t.algorithm.clone()),
            aggregate_file: aggregate_file(a, label),
            run_files: mine
                .iter()
                .filter(|c| c.result.is_ok())
                .map(|c| run_file(a, label, c.replication))
                .collect(),
            completed: agg.completed,
            requested: reps,
            complete: agg.complete(),
            failures,
            report_alpha: done.first().and_then(|t| t.report_alpha),
            mean_saturated: if done.is_empty() {
                0.0
            } else {
                done.iter().map(|t| t.saturation_count() as f64).sum::<f64>() / done.len() as f64
            },
        });
        aggregates.push(agg);
    }
    let x0 = exp.config.initial_point(exp.problem.dimension());
    let meta = RunMeta {
        version: config::CONFIG_VERSION,
        seed: exp.config.seed,
        replications: reps,
        problem: exp.problem.name().to_string(),
        dimension: exp.problem.dimension(),
        bounds: exp.model.clone(),
        bounds_source: exp.model.source,
        stationarity_reference: if exp.problem.exact_gradient(&x0).is_some() {
            "exact_gradient".into()
        } else {
            "unavailable".into()
        },
        objective_exact,
        algorithms: metas,
        config: exp.config.clone(),
    };
    Ok(CompareOutput {
        cells: outcomes,
        aggregates,
        meta,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes run CSVs, aggregate CSVs, `run_meta.json` and the SVG charts under `dir`.
pub fn write_compare(out: &CompareOutput, dir: &Path) -> Result<()> {
    for sub in ["runs", "plots"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for cell in &out.cells {
        if let Ok(t) = &cell.result {
            let label = &out.meta.algorithms[cell.algorithm].label;
            report::write_trajectory_csv(&dir.join(run_file(cell.algorithm, label, cell.replication)), t)?;
        }
    }
    for (agg, meta) in out.aggregates.iter().zip(&out.meta.algorithms) {
        write(&dir.join(&meta.aggregate_file), &agg.to_csv())?;
    }
    let json = serde_json::to_string_pretty(&out.meta).expect("metadata serializes");
    write(&dir.join("run_meta.json"), &(json + "\n"))?;
    write_plots(&out.aggregates, &dir.join("plots"))
}

pub fn write_plots(aggregates: &[AggregateReport], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (stem, svg) in plot::emit_plots(aggregates, &Axis::ALL) {
        write(&dir.join(format!("{stem}.svg")), &svg)?;
    }
    Ok(())
}

/// Rebuilds the aggregates of a `compare` output directory from its run CSVs.
pub fn reaggregate(dir: &Path) -> Result<Vec<AggregateReport>> {
    let meta = read_meta(dir)?;
    meta.algorithms
        .iter()
        .map(|m| {
            let runs = m
                .run_files
                .iter()
                .map(|f| report::read_trajectory_csv(&dir.join(f)))
                .collect::<Result<Vec<_>>>()?;
            aggregate(&m.label, &runs, m.requested)
        })
        .collect()
}

pub fn read_meta(dir: &Path) -> Result<RunMeta> {
    let p = dir.join("run_meta.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: p, source: e })
}

/// Aggregates of a `compare` output directory as written to disk.
pub fn read_aggregates(dir: &Path) -> Result<Vec<AggregateReport>> {
    let meta = read_meta(dir)?;
    meta.algorithms
        .iter()
        .map(|m| {
            let mut a = AggregateReport::read_csv(&dir.join(&m.aggregate_file), &m.label)?;
            a.completed = m.completed;
            a.requested = m.requested;
            Ok(a)
        })
        .collect()
}
