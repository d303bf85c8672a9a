//! First-order methods over biased oracles.
//!
//! All runs are sequential and seeded: the run generator is addressed by
//! `(seed, stream)` and hands one batch seed to every oracle evaluation, so a
//! `(config, seed)` pair always produces the same trajectory.

pub mod prox;
pub mod smooth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{BiasLevel, CostLedger, LedgerTotals, ProblemOracle};
use crate::prox::{stationarity_measure, BregmanGeometry, Regularizer};
use crate::rng::SampleBatch;

pub use prox::{run_mproxbvsg, run_proxabsg, run_proxabvsg, theorem7, StageBatch, StageConfig};
pub use smooth::{
    momentum_update, preset_theorem4, preset_theorem5, run_absg, run_abvsg, run_bsgd, Theorem4Constant,
};

/// Stepsizes indexed by the 0-based iteration `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant { alpha: f64 },
    /// `c / (w + i)^(1/3)`
    Diminishing { c: f64, w: f64 },
    /// Values past the end repeat the last entry.
    List { values: Vec<f64> },
}

impl StepSchedule {
    pub fn at(&self, i: usize) -> f64 {
        match self {
            StepSchedule::Constant { alpha } => *alpha,
            StepSchedule::Diminishing { c, w } => c / (w + i as f64).cbrt(),
            StepSchedule::List { values } => values[i.min(values.len() - 1)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            StepSchedule::Constant { alpha } => *alpha > 0.0 && alpha.is_finite(),
            StepSchedule::Diminishing { c, w } => *c > 0.0 && c.is_finite() && *w > 0.0 && w.is_finite(),
            StepSchedule::List { values } => !values.is_empty() && values.iter().all(|a| *a > 0.0 && a.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("stepsizes must be positive and finite: {self:?}")))
        }
    }
}

/// Scalar parameter schedule, optionally tied to the stepsize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamSchedule {
    Constant { value: f64 },
    /// `scale * alpha_i^2`
    StepSquared { scale: f64 },
    List { values: Vec<f64> },
}

impl ParamSchedule {
    pub fn at(&self, i: usize, alpha: f64) -> f64 {
        match self {
            ParamSchedule::Constant { value } => *value,
            ParamSchedule::StepSquared { scale } => scale * alpha * alpha,
            ParamSchedule::List { values } => values[i.min(values.len() - 1)],
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = match self {
            ParamSchedule::Constant { value } => *value >= 0.0 && value.is_finite(),
            ParamSchedule::StepSquared { scale } => *scale >= 0.0 && scale.is_finite(),
            ParamSchedule::List { values } => !values.is_empty() && values.iter().all(|v| *v >= 0.0 && v.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("{name} must be nonnegative and finite: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BatchSchedule {
    Constant { size: u64 },
    List { sizes: Vec<u64> },
}

impl BatchSchedule {
    pub fn at(&self, i: usize) -> u64 {
        match self {
            BatchSchedule::Constant { size } => *size,
            BatchSchedule::List { sizes } => sizes[i.min(sizes.len() - 1)],
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            BatchSchedule::Constant { size } => *size >= 1,
            BatchSchedule::List { sizes } => !sizes.is_empty() && sizes.iter().all(|b| *b >= 1),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("batch sizes must be at least 1"))
        }
    }
}

/// Bias levels indexed by iteration or stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LevelSchedule {
    Constant { eta: BiasLevel },
    /// `ceil(start * ratio^i)`
    Geometric { start: BiasLevel, ratio: f64 },
    List { levels: Vec<BiasLevel> },
}

impl LevelSchedule {
    pub fn at(&self, i: usize) -> BiasLevel {
        match self {
            LevelSchedule::Constant { eta } => *eta,
            LevelSchedule::Geometric { start, ratio } => {
                let v = (start.as_f64() * ratio.powi(i as i32)).ceil();
                BiasLevel::new(v.clamp(1.0, u64::MAX as f64) as u64).unwrap_or(BiasLevel::ONE)
            }
            LevelSchedule::List { levels } => levels[i.min(levels.len() - 1)],
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            LevelSchedule::Geometric { ratio, .. } if !(*ratio > 0.0 && ratio.is_finite()) => {
                Err(Error::config("geometric level ratio must be positive"))
            }
            LevelSchedule::List { levels } if levels.is_empty() => Err(Error::config("level list is empty")),
            _ => Ok(()),
        }
    }
}

/// Adaptation rule of the variance-reduced methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VrOption {
    /// Bias test only.
    #[default]
    #[serde(rename = "I")]
    One,
    /// Bias test and consecutive-level variance test.
    #[serde(rename = "II")]
    Two,
}

fn default_gamma() -> ParamSchedule {
    ParamSchedule::Constant { value: 1.0 / 16.0 }
}

fn default_rounds() -> usize {
    8
}

/// Configuration shared by the smooth algorithms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothRunConfig {
    pub iterations: usize,
    #[serde(default)]
    pub x0: Vec<f64>,
    pub step: StepSchedule,
    pub batch: BatchSchedule,
    /// Initial batch of the variance-reduced methods; defaults to the schedule's first entry.
    #[serde(default)]
    pub first_batch: Option<u64>,
    pub eta_bar: BiasLevel,
    /// Fixed levels of B-SGD; defaults to `eta_bar` throughout.
    #[serde(default)]
    pub eta: Option<LevelSchedule>,
    #[serde(default = "default_gamma")]
    pub gamma: ParamSchedule,
    #[serde(default)]
    pub tau: Option<ParamSchedule>,
    #[serde(default)]
    pub beta: Option<ParamSchedule>,
    #[serde(default)]
    pub option: VrOption,
    #[serde(default)]
    pub lipschitz: Option<f64>,
    /// Cap on oracle evaluations per iteration in the adaptive level search.
    #[serde(default = "default_rounds")]
    pub max_search_rounds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
}

impl SmoothRunConfig {
    /// Constant stepsize and batch, `eta_bar` as the fixed level, everything else default.
    pub fn basic(iterations: usize, x0: Vec<f64>, alpha: f64, batch: u64, eta_bar: BiasLevel) -> Self {
        Self {
            iterations,
            x0,
            step: StepSchedule::Constant { alpha },
            batch: BatchSchedule::Constant { size: batch },
            first_batch: None,
            eta_bar,
            eta: None,
            gamma: default_gamma(),
            tau: None,
            beta: None,
            option: VrOption::One,
            lipschitz: None,
            max_search_rounds: default_rounds(),
            seed: 0,
            stream: 0,
        }
    }

    pub(crate) fn validate(&self, problem: &dyn ProblemOracle) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations must be at least 1"));
        }
        if self.x0.len() != problem.dimension() {
            return Err(Error::config(format!(
                "initial point has dimension {}, problem {} expects {}",
                self.x0.len(),
                problem.name(),
                problem.dimension()
            )));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("initial point must be finite"));
        }
        if let Some(max) = problem.max_level() {
            if self.eta_bar > max {
                return Err(Error::config(format!(
                    "eta_bar {} exceeds the largest level {max} of {}",
                    self.eta_bar,
                    problem.name()
                )));
            }
        }
        if self.max_search_rounds == 0 {
            return Err(Error::config("max_search_rounds must be at least 1"));
        }
        if matches!(self.first_batch, Some(0)) {
            return Err(Error::config("first batch must be at least 1"));
        }
        if let Some(l) = self.lipschitz {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::config("lipschitz constant must be positive"));
            }
        }
        self.step.validate()?;
        self.batch.validate()?;
        self.gamma.validate("gamma")?;
        if let Some(t) = &self.tau {
            t.validate("tau")?;
        }
        if let Some(b) = &self.beta {
            b.validate("beta")?;
        }
        if let Some(e) = &self.eta {
            e.validate()?;
        }
        Ok(())
    }
}

/// Configuration of the proximal single-loop methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxRunConfig {
    #[serde(flatten)]
    pub base: SmoothRunConfig,
    #[serde(default)]
    pub phi: Regularizer,
    #[serde(default)]
    pub omega: BregmanGeometry,
    /// Level of the first proximal adaptive iteration.
    #[serde(default)]
    pub eta0: Option<BiasLevel>,
    /// Stepsize of the reported stationarity measure; defaults to `1 / (2L)`.
    #[serde(default)]
    pub report_alpha: Option<f64>,
}

impl ProxRunConfig {
    pub fn new(base: SmoothRunConfig, phi: Regularizer) -> Self {
        Self {
            base,
            phi,
            omega: BregmanGeometry::SquaredEuclidean,
            eta0: None,
            report_alpha: None,
        }
    }
}

/// One iteration of a run: the iterate it started from and what it cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    /// 1-based global iteration index.
    pub k: usize,
    /// Stage index of multi-stage runs.
    pub stage: Option<usize>,
    pub x: Vec<f64>,
    pub eta: u64,
    pub batch: u64,
    /// `f(x_k) + phi(x_k)`.
    pub objective: f64,
    /// `||grad f(x_k)||^2`, or the squared gradient mapping norm for composite runs.
    pub stationarity_sq: f64,
    /// Ledger totals including this iteration's oracle calls.
    pub totals: LedgerTotals,
    pub saturated: bool,
    /// Norm of the gradient estimate (or momentum estimator) used in the update.
    pub estimate_norm: f64,
    /// Oracle evaluations spent by the level search.
    pub search_rounds: u32,
    /// False when the level search hit its round cap.
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub algorithm: String,
    pub records: Vec<IterRecord>,
    pub final_x: Vec<f64>,
    pub ledger: CostLedger,
    pub eta_bar: u64,
    /// Stepsize behind the stationarity column when it is a gradient mapping.
    pub report_alpha: Option<f64>,
    pub objective_exact: bool,
}

impl Trajectory {
    /// Number of iterations run at the level cap.
    pub fn saturation_count(&self) -> usize {
        self.records.iter().filter(|r| r.saturated).count()
    }

    pub fn etas(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.eta).collect()
    }

    pub fn iterates(&self) -> Vec<&[f64]> {
        self.records.iter().map(|r| r.x.as_slice()).collect()
    }
}

pub(crate) fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

/// Builds records with the reporting quantities of one run.
pub(crate) struct Recorder<'a> {
    problem: &'a dyn ProblemOracle,
    phi: Regularizer,
    omega: BregmanGeometry,
    report_alpha: Option<f64>,
    records: Vec<IterRecord>,
    exact: bool,
}

pub(crate) struct Step {
    pub k: usize,
    pub stage: Option<usize>,
    pub eta: BiasLevel,
    pub batch: u64,
    pub saturated: bool,
    pub estimate_norm: f64,
    pub search_rounds: u32,
    pub converged: bool,
}

impl<'a> Recorder<'a> {
    pub fn new(
        problem: &'a dyn ProblemOracle,
        phi: Regularizer,
        omega: BregmanGeometry,
        report_alpha: Option<f64>,
        capacity: usize,
    ) -> Self {
        Self {
            problem,
            phi,
            omega,
            report_alpha,
            records: Vec::with_capacity(capacity),
            exact: true,
        }
    }

    pub fn push(&mut self, x: &[f64], step: Step, ledger: &CostLedger) {
        let obj = self.problem.objective(x);
        self.exact &= obj.exact;
        let stationarity_sq = match self.problem.exact_gradient(x) {
            Some(g) if self.phi.is_zero() => norm_sq(&g),
            Some(g) => {
                let a = self.report_alpha.unwrap_or(1.0);
                stationarity_measure(x, &g, a, &self.phi, &self.omega).map_or(f64::NAN, |m| m * m)
            }
            None => f64::NAN,
        };
        self.records.push(IterRecord {
            k: step.k,
            stage: step.stage,
            x: x.to_vec(),
            eta: step.eta.get(),
            batch: step.batch,
            objective: obj.value + self.phi.value(x),
            stationarity_sq,
            totals: ledger.totals(),
            saturated: step.saturated,
            estimate_norm: step.estimate_norm,
            search_rounds: step.search_rounds,
            converged: step.converged,
        });
    }

    pub fn finish(self, algorithm: &str, final_x: Vec<f64>, ledger: CostLedger, eta_bar: BiasLevel) -> Trajectory {
        let report_alpha = if self.phi.is_zero() { None } else { self.report_alpha };
        Trajectory {
            algorithm: algorithm.to_string(),
            records: self.records,
            final_x,
            ledger,
            eta_bar: eta_bar.get(),
            report_alpha,
            objective_exact: self.exact,
        }
    }
}

/// Evaluates `batch` at `(x, eta)`, tagging errors with the iteration `k`.
pub(crate) fn sample(
    problem: &dyn ProblemOracle,
    x: &[f64],
    eta: BiasLevel,
    batch: &SampleBatch,
    k: usize,
) -> Result<Vec<f64>> {
    problem
        .sample_gradient(x, eta, batch)
        .map(|e| e.g)
        .map_err(|e| e.at_iteration(k))
}
