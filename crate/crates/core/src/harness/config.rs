//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algorithms::{
    self, preset_theorem4, preset_theorem5, theorem7, LevelSchedule, ProxRunConfig, SmoothRunConfig, StageBatch,
    StageConfig, Theorem4Constant, Trajectory, VrOption,
};
use crate::error::{Error, Result};
use crate::fit::{FitReport, FitSettings};
use crate::oracle::{BiasLevel, BoundModel, ProblemOracle};
use crate::problems::{
    dro::make_synthetic_dataset, CompositionProblem, CompositionSpec, DroDataset, DroProblem, MdpProblem,
    SyntheticOracle, SyntheticSpec, TabularMdp, UncertaintySet,
};
use crate::prox::Regularizer;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub bounds: BoundsConfig,
    pub algorithms: Vec<AlgorithmConfig>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    /// Initial point shared by every algorithm that does not set its own.
    #[serde(default)]
    pub x0: Vec<f64>,
    /// Smoothness constant handed to algorithms that need one.
    #[serde(default)]
    pub lipschitz: Option<f64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Settings of the `fit` subcommand.
    #[serde(default)]
    pub fit: FitSettings,
}

fn default_replications() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemConfig {
    Composition {
        #[serde(flatten)]
        spec: CompositionSpec,
    },
    Mdp {
        /// Inline instance; the built-in benchmark when both this and `path` are absent.
        #[serde(default)]
        mdp: Option<TabularMdp>,
        #[serde(default)]
        path: Option<PathBuf>,
    },
    Dro {
        dataset: DatasetConfig,
        set: UncertaintySet,
    },
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetConfig {
    Csv { path: PathBuf },
    Synthetic { n: usize, d: usize, flip: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum BoundsConfig {
    /// Closed-form bounds of the problem.
    #[default]
    Analytic,
    /// A file written by `fit`, or a bare bound model.
    Fitted { path: PathBuf },
    Inline { model: BoundModel },
}

/// One entry of the algorithm list. Every variant carries a `label` used in
/// file names and plot legends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "snake_case")]
pub enum AlgorithmConfig {
    Bsgd {
        label: String,
        #[serde(flatten)]
        run: SmoothRunConfig,
    },
    Absg {
        label: String,
        #[serde(flatten)]
        run: SmoothRunConfig,
    },
    Abvsg {
        label: String,
        #[serde(flatten)]
        run: SmoothRunConfig,
    },
    AbvsgTheorem4 {
        label: String,
        iterations: usize,
        batch: u64,
        eta_bar: BiasLevel,
        #[serde(default)]
        constant: Theorem4Constant,
        #[serde(default)]
        option: VrOption,
    },
    AbvsgTheorem5 {
        label: String,
        iterations: usize,
        c: f64,
        eta_bar: BiasLevel,
        #[serde(default)]
        option: VrOption,
    },
    Proxabsg {
        label: String,
        #[serde(flatten)]
        run: ProxRunConfig,
    },
    Proxabvsg {
        label: String,
        #[serde(flatten)]
        run: ProxRunConfig,
    },
    Mproxbvsg {
        label: String,
        #[serde(flatten)]
        run: StageConfig,
    },
    MproxbvsgTheorem7 {
        label: String,
        total: usize,
        #[serde(default = "level_one")]
        eta: LevelSchedule,
        #[serde(default = "stage_batch_one")]
        b0: StageBatch,
        #[serde(default)]
        phi: Regularizer,
    },
}

fn level_one() -> LevelSchedule {
    LevelSchedule::Constant { eta: BiasLevel::ONE }
}

fn stage_batch_one() -> StageBatch {
    StageBatch::Fixed { value: 1 }
}

/// A fully resolved algorithm: presets expanded, run-specific fields still unset.
#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedRun {
    Bsgd(SmoothRunConfig),
    Absg(SmoothRunConfig),
    Abvsg(SmoothRunConfig),
    Proxabsg(ProxRunConfig),
    Proxabvsg(ProxRunConfig),
    Mproxbvsg(StageConfig),
}

impl AlgorithmConfig {
    pub fn label(&self) -> &str {
        match self {
            AlgorithmConfig::Bsgd { label, .. }
            | AlgorithmConfig::Absg { label, .. }
            | AlgorithmConfig::Abvsg { label, .. }
            | AlgorithmConfig::AbvsgTheorem4 { label, .. }
            | AlgorithmConfig::AbvsgTheorem5 { label, .. }
            | AlgorithmConfig::Proxabsg { label, .. }
            | AlgorithmConfig::Proxabvsg { label, .. }
            | AlgorithmConfig::Mproxbvsg { label, .. }
            | AlgorithmConfig::MproxbvsgTheorem7 { label, .. } => label,
        }
    }

    /// Expands presets and fills `x0` and the smoothness constant from the experiment.
    pub fn resolve(&self, x0: &[f64], lipschitz: Option<f64>) -> Result<ResolvedRun> {
        let need_l = |what: &str| {
            lipschitz.ok_or_else(|| Error::config(format!("{what} needs `lipschitz` in the experiment config")))
        };
        let fill = |mut run: SmoothRunConfig| {
            if run.x0.is_empty() {
                run.x0 = x0.to_vec();
            }
            if run.lipschitz.is_none() {
                run.lipschitz = lipschitz;
            }
            run
        };
        Ok(match self {
            AlgorithmConfig::Bsgd { run, .. } => ResolvedRun::Bsgd(fill(run.clone())),
            AlgorithmConfig::Absg { run, .. } => ResolvedRun::Absg(fill(run.clone())),
            AlgorithmConfig::Abvsg { run, .. } => ResolvedRun::Abvsg(fill(run.clone())),
            AlgorithmConfig::AbvsgTheorem4 {
                iterations,
                batch,
                eta_bar,
                constant,
                option,
                ..
            } => {
                let mut run = preset_theorem4(need_l("abvsg_theorem4")?, *batch, *iterations, *eta_bar, *constant)?;
                run.option = *option;
                ResolvedRun::Abvsg(fill(run))
            }
            AlgorithmConfig::AbvsgTheorem5 {
                iterations,
                c,
                eta_bar,
                option,
                ..
            } => {
                let mut run = preset_theorem5(need_l("abvsg_theorem5")?, *c, *iterations, *eta_bar)?;
                run.option = *option;
                ResolvedRun::Abvsg(fill(run))
            }
            AlgorithmConfig::Proxabsg { run, .. } => {
                let mut run = run.clone();
                run.base = fill(run.base);
                ResolvedRun::Proxabsg(run)
            }
            AlgorithmConfig::Proxabvsg { run, .. } => {
                let mut run = run.clone();
                run.base = fill(run.base);
                ResolvedRun::Proxabvsg(run)
            }
            AlgorithmConfig::Mproxbvsg { run, .. } => {
                let mut run = run.clone();
                if run.x0.is_empty() {
                    run.x0 = x0.to_vec();
                }
                ResolvedRun::Mproxbvsg(run)
            }
            AlgorithmConfig::MproxbvsgTheorem7 {
                total, eta, b0, phi, ..
            } => {
                let mut run = theorem7(*total, need_l("mproxbvsg_theorem7")?)?;
                run.eta = eta.clone();
                run.b0 = *b0;
                run.phi = *phi;
                run.x0 = x0.to_vec();
                ResolvedRun::Mproxbvsg(run)
            }
        })
    }
}

impl ResolvedRun {
    /// Runs with the generator addressed by `(seed, stream)`.
    pub fn execute(&self, problem: &dyn ProblemOracle, model: &BoundModel, seed: u64, stream: u64) -> Result<Trajectory> {
        let smooth = |run: &SmoothRunConfig| {
            let mut run = run.clone();
            run.seed = seed;
            run.stream = stream;
            run
        };
        let prox = |run: &ProxRunConfig| {
            let mut run = run.clone();
            run.base.seed = seed;
            run.base.stream = stream;
            run
        };
        match self {
            ResolvedRun::Bsgd(run) => algorithms::run_bsgd(problem, &smooth(run)),
            ResolvedRun::Absg(run) => algorithms::run_absg(problem, model, &smooth(run)),
            ResolvedRun::Abvsg(run) => algorithms::run_abvsg(problem, model, &smooth(run)),
            ResolvedRun::Proxabsg(run) => algorithms::run_proxabsg(problem, model, &prox(run)),
            ResolvedRun::Proxabvsg(run) => algorithms::run_proxabvsg(problem, model, &prox(run)),
            ResolvedRun::Mproxbvsg(run) => {
                let mut run = run.clone();
                run.seed = seed;
                run.stream = stream;
                algorithms::run_mproxbvsg(problem, model, &run)
            }
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Json {
            path: origin.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.replications == 0 {
            return Err(Error::config("replications must be at least 1"));
        }
        if self.algorithms.is_empty() {
            return Err(Error::config("the algorithm list is empty"));
        }
        let mut labels: Vec<&str> = self.algorithms.iter().map(|a| a.label()).collect();
        if labels.iter().any(|l| l.is_empty()) {
            return Err(Error::config("algorithm labels must be nonempty"));
        }
        labels.sort_unstable();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::config(format!("duplicate algorithm label `{}`", w[0])));
        }
        Ok(())
    }

    /// Builds the problem; relative paths resolve against `base`.
    pub fn build_problem(&self, base: &Path) -> Result<Box<dyn ProblemOracle>> {
        let as_config = |e: Error| if e.is_config() { e } else { Error::Config(e.to_string()) };
        let problem: Box<dyn ProblemOracle> = match &self.problem {
            ProblemConfig::Composition { spec } => Box::new(CompositionProblem::new(*spec).map_err(as_config)?),
            ProblemConfig::Mdp { mdp, path } => {
                if mdp.is_some() && path.is_some() {
                    return Err(Error::config("give either `mdp` or `path`, not both"));
                }
                Box::new(MdpProblem::new(mdp_of(&self.problem, base)?).map_err(as_config)?)
            }
            ProblemConfig::Dro { dataset, set } => {
                let data = match dataset {
                    DatasetConfig::Csv { path } => DroDataset::read_csv(&resolve(base, path))?,
                    DatasetConfig::Synthetic { n, d, flip, seed } => make_synthetic_dataset(*n, *d, *flip, *seed),
                };
                Box::new(DroProblem::new(data, *set).map_err(as_config)?)
            }
            ProblemConfig::Synthetic { spec } => Box::new(SyntheticOracle::new(spec).map_err(as_config)?),
        };
        if !self.x0.is_empty() && self.x0.len() != problem.dimension() {
            return Err(Error::config(format!(
                "x0 has dimension {}, problem {} expects {}",
                self.x0.len(),
                problem.name(),
                problem.dimension()
            )));
        }
        Ok(problem)
    }

    /// Initial point, defaulting to the origin.
    pub fn initial_point(&self, dimension: usize) -> Vec<f64> {
        if self.x0.is_empty() {
            vec![0.0; dimension]
        } else {
            self.x0.clone()
        }
    }

    /// Bound model for the runs, read from disk when fitted.
    pub fn bound_model(&self, base: &Path) -> Result<BoundModel> {
        match &self.bounds {
            BoundsConfig::Inline { model } => {
                model.validate().map_err(|e| Error::Config(e.to_string()))?;
                Ok(model.clone())
            }
            BoundsConfig::Fitted { path } => load_bound_model(&resolve(base, path)),
            BoundsConfig::Analytic => match &self.problem {
                ProblemConfig::Synthetic { spec } => Ok(SyntheticOracle::new(spec)
                    .map_err(|e| Error::Config(e.to_string()))?
                    .exact_bounds()),
                ProblemConfig::Mdp { .. } => {
                    let mdp = MdpProblem::new(mdp_of(&self.problem, base)?).map_err(|e| Error::Config(e.to_string()))?;
                    Ok(mdp.analytic_bounds())
                }
                ProblemConfig::Composition { .. } => Err(Error::config(
                    "the composition problem has no closed-form variance bound; use fitted or inline bounds",
                )),
                ProblemConfig::Dro { .. } => Err(Error::config(
                    "the robust regression problem has no closed-form bias bound; use fitted or inline bounds",
                )),
            },
        }
    }
}

fn mdp_of(problem: &ProblemConfig, base: &Path) -> Result<TabularMdp> {
    match problem {
        ProblemConfig::Mdp { mdp: Some(m), .. } => Ok(m.clone()),
        ProblemConfig::Mdp { path: Some(p), .. } => {
            let p = resolve(base, p);
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Json { path: p, source: e })
        }
        _ => Ok(TabularMdp::benchmark()),
    }
}

/// Reads a `fit` report or a bare bound model.
pub fn load_bound_model(path: &Path) -> Result<BoundModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let model = match serde_json::from_str::<FitReport>(&text) {
        Ok(report) => report.model,
        Err(_) => serde_json::from_str::<BoundModel>(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?,
    };
    model.validate().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(model)
}

pub(crate) fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
