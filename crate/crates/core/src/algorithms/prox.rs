//! Proximal methods for `f + phi`.

use serde::{Deserialize, Serialize};

use super::smooth::{descent_step, momentum_update, report_alpha, run_vr_engine};
use super::{norm_sq, sample, LevelSchedule, ProxRunConfig, Recorder, Step, Trajectory};
use crate::error::{Error, Result};
use crate::oracle::{invert_hb_sq, BiasLevel, BoundModel, CostLedger, ProblemOracle};
use crate::prox::{BregmanGeometry, Regularizer};
use crate::rng::{run_rng, SampleBatch};

/// Levels set from the movement of the last proximal step.
///
/// The first iteration runs at `eta0`. Iteration `k >= 2` uses the smallest
/// level with `hb^2 <= (1/(2 a_k a_{k-1}) - L/(2 a_k)) ||x_k - x_{k-1}||^2`.
pub fn run_proxabsg(problem: &dyn ProblemOracle, model: &BoundModel, cfg: &ProxRunConfig) -> Result<Trajectory> {
    let base = &cfg.base;
    base.validate(problem)?;
    cfg.phi.validate()?;
    let l = base
        .lipschitz
        .ok_or_else(|| Error::config("proxabsg needs the lipschitz constant"))?;
    let mut rng = run_rng(base.seed, base.stream);
    let mut ledger = CostLedger::new();
    let mut rec = Recorder::new(problem, cfg.phi, cfg.omega, report_alpha(cfg), base.iterations);
    let mut x = base.x0.clone();
    let mut x_prev: Vec<f64> = Vec::new();
    for k in 1..=base.iterations {
        let i = k - 1;
        let alpha = base.step.at(i);
        let (eta, saturated) = if i == 0 {
            let e = cfg.eta0.unwrap_or(BiasLevel::ONE).min(base.eta_bar);
            (e, e == base.eta_bar)
        } else {
            let coef = 1.0 / (2.0 * alpha * base.step.at(i - 1)) - l / (2.0 * alpha);
            if !(coef > 0.0) {
                return Err(Error::config(format!(
                    "stepsize {alpha} at iteration {k} leaves no room for bias (L = {l})"
                )));
            }
            let moved: f64 = x.iter().zip(&x_prev).map(|(a, b)| (a - b) * (a - b)).sum();
            let inv = invert_hb_sq(model, coef * moved, BiasLevel::ONE, base.eta_bar);
            (inv.level, inv.saturated)
        };
        let b = base.batch.at(i);
        let batch = SampleBatch::draw(&mut rng, b as usize);
        let g = sample(problem, &x, eta, &batch, k)?;
        ledger.record(k, eta, b);
        rec.push(
            &x,
            Step {
                k,
                stage: None,
                eta,
                batch: b,
                saturated,
                estimate_norm: norm_sq(&g).sqrt(),
                search_rounds: 1,
                converged: true,
            },
            &ledger,
        );
        let next = descent_step(&x, &g, alpha, &cfg.phi, &cfg.omega);
        x_prev = std::mem::replace(&mut x, next);
    }
    Ok(rec.finish("proxabsg", x, ledger, base.eta_bar))
}

/// Proximal AB-VSG.
pub fn run_proxabvsg(problem: &dyn ProblemOracle, model: &BoundModel, cfg: &ProxRunConfig) -> Result<Trajectory> {
    cfg.phi.validate()?;
    run_vr_engine(problem, model, cfg, "proxabvsg")
}

/// Batch of the large evaluation that opens each stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageBatch {
    Fixed { value: u64 },
    /// `ceil(hv^2(eta_s) / (32 L^2 t^2))` for a target accuracy `t`, clamped to `[1, 1e6]`.
    FromTarget { target: f64 },
}

const MAX_STAGE_BATCH: f64 = 1e6;

fn default_stage_batch() -> StageBatch {
    StageBatch::Fixed { value: 1 }
}

/// Configuration of the multi-stage method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stages: usize,
    /// Updates per stage.
    pub inner: usize,
    pub alpha: f64,
    /// Defaults to `32 alpha^2 L^2`.
    #[serde(default)]
    pub beta: Option<f64>,
    pub lipschitz: f64,
    /// Level of each stage, indexed from 0.
    pub eta: LevelSchedule,
    #[serde(default = "default_stage_batch")]
    pub b0: StageBatch,
    #[serde(default)]
    pub x0: Vec<f64>,
    #[serde(default)]
    pub phi: Regularizer,
    #[serde(default)]
    pub omega: BregmanGeometry,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
    #[serde(default)]
    pub report_alpha: Option<f64>,
}

impl StageConfig {
    pub fn beta(&self) -> f64 {
        self.beta
            .unwrap_or(32.0 * self.alpha * self.alpha * self.lipschitz * self.lipschitz)
    }

    /// Level cap over all stages.
    pub fn eta_bar(&self) -> BiasLevel {
        (0..self.stages).map(|s| self.eta.at(s)).max().unwrap_or(BiasLevel::ONE)
    }

    pub fn stage_batch(&self, model: &BoundModel, eta: BiasLevel) -> u64 {
        match self.b0 {
            StageBatch::Fixed { value } => value,
            StageBatch::FromTarget { target } => {
                let hv = model.hv(eta);
                let l = self.lipschitz;
                let b = (hv * hv / (32.0 * l * l * target * target)).ceil();
                if b.is_nan() {
                    1
                } else {
                    b.clamp(1.0, MAX_STAGE_BATCH) as u64
                }
            }
        }
    }

    fn validate(&self, problem: &dyn ProblemOracle) -> Result<()> {
        if self.stages == 0 || self.inner == 0 {
            return Err(Error::config("stages and inner iterations must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("stepsize must be positive"));
        }
        if !(self.lipschitz > 0.0 && self.lipschitz.is_finite()) {
            return Err(Error::config("lipschitz constant must be positive"));
        }
        let beta = self.beta();
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::config(format!("momentum beta = {beta} outside (0, 1]")));
        }
        if self.x0.len() != problem.dimension() || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!(
                "initial point must be finite with dimension {}",
                problem.dimension()
            )));
        }
        match self.b0 {
            StageBatch::Fixed { value: 0 } => return Err(Error::config("stage batch must be at least 1")),
            StageBatch::FromTarget { target } if !(target > 0.0) => {
                return Err(Error::config("target accuracy must be positive"))
            }
            _ => {}
        }
        if let LevelSchedule::List { levels } = &self.eta {
            if levels.is_empty() {
                return Err(Error::config("level list is empty"));
            }
        }
        if let Some(max) = problem.max_level() {
            if self.eta_bar() > max {
                return Err(Error::config(format!("stage level exceeds the largest level {max}")));
            }
        }
        self.phi.validate()
    }
}

/// Multi-stage method: fixed level per stage, a large batch opening each stage and
/// single-sample recursive updates inside it.
pub fn run_mproxbvsg(problem: &dyn ProblemOracle, model: &BoundModel, cfg: &StageConfig) -> Result<Trajectory> {
    cfg.validate(problem)?;
    let beta = cfg.beta();
    let report = cfg.report_alpha.or(Some(1.0 / (2.0 * cfg.lipschitz)));
    let eta_bar = cfg.eta_bar();
    let mut rng = run_rng(cfg.seed, cfg.stream);
    let mut ledger = CostLedger::new();
    let mut rec = Recorder::new(problem, cfg.phi, cfg.omega, report, cfg.stages * cfg.inner);
    let mut x = cfg.x0.clone();
    let mut k = 0usize;
    for s in 0..cfg.stages {
        let eta = cfg.eta.at(s);
        let b0 = cfg.stage_batch(model, eta);
        k += 1;
        let batch = SampleBatch::draw(&mut rng, b0 as usize);
        let mut g = sample(problem, &x, eta, &batch, k)?;
        ledger.record(k, eta, b0);
        rec.push(&x, stage_step(k, s, eta, b0, eta == eta_bar, &g), &ledger);
        for t in 1..=cfg.inner {
            let x_next = descent_step(&x, &g, cfg.alpha, &cfg.phi, &cfg.omega);
            if t == cfg.inner {
                x = x_next;
                break;
            }
            k += 1;
            let batch = SampleBatch::draw(&mut rng, 1);
            g = momentum_update(problem, &x, &x_next, &g, eta, eta, beta, &batch).map_err(|e| e.at_iteration(k))?;
            x = x_next;
            ledger.record(k, eta, 1);
            rec.push(&x, stage_step(k, s, eta, 1, eta == eta_bar, &g), &ledger);
        }
        log::debug!("mproxbvsg stage {s} done at k={k}, eta={eta}, b0={b0}");
    }
    Ok(rec.finish("mproxbvsg", x, ledger, eta_bar))
}

fn stage_step(k: usize, s: usize, eta: BiasLevel, batch: u64, saturated: bool, g: &[f64]) -> Step {
    Step {
        k,
        stage: Some(s),
        eta,
        batch,
        saturated,
        estimate_norm: norm_sq(g).sqrt(),
        search_rounds: 1,
        converged: true,
    }
}

/// Stage layout for a budget of `total` updates: `K = round(T^(2/3))` updates
/// per stage, `S = round(T^(1/3))` stages, `alpha = T^(-1/3)`, `beta = 32 alpha^2 L^2`.
///
/// Levels default to 1 and the stage batch to 1; `x0` is left empty.
pub fn theorem7(total: usize, lipschitz: f64) -> Result<StageConfig> {
    if total == 0 || !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(Error::config("budget and lipschitz constant must be positive"));
    }
    let t = total as f64;
    let inner = (t.powf(2.0 / 3.0).round() as usize).max(1);
    let stages = (t.cbrt().round() as usize).max(1);
    let alpha = 1.0 / t.cbrt();
    let l = lipschitz;
    let alpha_cap = (1.0 / (4.0 * 2f64.sqrt() * l * l)).min(1.0 / (2.0 * l));
    if alpha > alpha_cap * (1.0 + 1e-12) {
        return Err(Error::config(format!(
            "stepsize {alpha} exceeds {alpha_cap} for L = {l}; increase the budget"
        )));
    }
    let beta = 32.0 * alpha * alpha * l * l;
    if !(beta > 0.0 && beta <= 1.0 + 1e-12) {
        return Err(Error::config(format!("momentum beta = {beta} outside (0, 1]")));
    }
    Ok(StageConfig {
        stages,
        inner,
        alpha,
        beta: Some(beta.min(1.0)),
        lipschitz: l,
        eta: LevelSchedule::Constant { eta: BiasLevel::ONE },
        b0: default_stage_batch(),
        x0: Vec::new(),
        phi: Regularizer::Zero,
        omega: BregmanGeometry::SquaredEuclidean,
        seed: 0,
        stream: 0,
        report_alpha: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::{run_abvsg, run_bsgd, ParamSchedule, SmoothRunConfig};
    use crate::oracle::BoundFn;
    use crate::problems::synthetic::{BiasProfile, SyntheticOracle, SyntheticSpec};

    fn lvl(e: u64) -> BiasLevel {
        BiasLevel::new(e).unwrap()
    }

    fn noisy(d: usize) -> SyntheticOracle {
        SyntheticOracle::new(&SyntheticSpec::diagonal(&vec![1.0; d], BiasProfile::Power { a: 0.5, p: 1.0 }, 0.3)).unwrap()
    }

    #[test]
    fn zero_regularizer_matches_smooth_run() {
        let p = noisy(3);
        let model = p.exact_bounds();
        let mut base = SmoothRunConfig::basic(25, vec![1.0, -1.0, 2.0], 0.1, 3, lvl(40));
        base.beta = Some(ParamSchedule::Constant { value: 0.3 });
        base.seed = 11;
        let smooth = run_abvsg(&p, &model, &base).unwrap();
        let prox = run_proxabvsg(&p, &model, &ProxRunConfig::new(base, Regularizer::Zero)).unwrap();
        assert_eq!(smooth.iterates(), prox.iterates());
        assert_eq!(smooth.ledger, prox.ledger);
    }

    #[test]
    fn vr_with_unit_momentum_is_sgd() {
        let p = noisy(2);
        let mut base = SmoothRunConfig::basic(15, vec![1.0, 2.0], 0.2, 4, lvl(1));
        base.beta = Some(ParamSchedule::Constant { value: 1.0 });
        base.seed = 5;
        let model = BoundModel::exact();
        let a = run_abvsg(&p, &model, &base).unwrap();
        let b = run_bsgd(&p, &base).unwrap();
        assert_eq!(a.iterates(), b.iterates());
        assert_eq!(a.final_x, b.final_x);
    }

    #[test]
    fn proxabsg_first_level_and_monotone_rule() {
        let p = noisy(2);
        let model = BoundModel::new(BoundFn::Power { a: 1.0, p: 1.0 }, BoundFn::Zero, 0.0, None).unwrap();
        let mut base = SmoothRunConfig::basic(10, vec![2.0, 2.0], 0.25, 2, lvl(1000));
        base.lipschitz = Some(1.0);
        let mut cfg = ProxRunConfig::new(base, Regularizer::L1 { lambda: 0.1 });
        cfg.eta0 = Some(lvl(3));
        let t = run_proxabsg(&p, &model, &cfg).unwrap();
        assert_eq!(t.records[0].eta, 3);
        // coef = 1/(2 a^2) - L/(2a) = 8 - 2 = 6
        for w in t.records.windows(2) {
            let moved: f64 = w[1].x.iter().zip(&w[0].x).map(|(a, b)| (a - b) * (a - b)).sum();
            let thr = 6.0 * moved;
            let e = w[1].eta as f64;
            if !w[1].saturated {
                assert!(1.0 / (e * e) <= thr * (1.0 + 1e-9));
                if e > 1.0 {
                    assert!(1.0 / ((e - 1.0) * (e - 1.0)) > thr);
                }
            }
        }
        cfg.base.lipschitz = Some(10.0);
        assert!(matches!(run_proxabsg(&p, &model, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn theorem7_layout() {
        let c = theorem7(1000, 1.25).unwrap();
        assert_eq!((c.stages, c.inner), (10, 100));
        assert!((c.alpha - 0.1).abs() < 1e-12);
        assert!((c.beta() - 0.5).abs() < 1e-12);
        assert!(theorem7(8, 1.25).is_err());
    }

    #[test]
    fn stage_oracle_count_and_handoff() {
        let p = noisy(2);
        let mut cfg = theorem7(1000, 1.0).unwrap();
        cfg.x0 = vec![1.0, 1.0];
        cfg.b0 = StageBatch::Fixed { value: 7 };
        cfg.eta = LevelSchedule::Geometric { start: lvl(1), ratio: 2.0 };
        cfg.phi = Regularizer::L1 { lambda: 0.05 };
        let t = run_mproxbvsg(&p, &p.exact_bounds(), &cfg).unwrap();
        let tot = t.ledger.totals();
        assert_eq!(tot.samples, 10 * 7 + 10 * 99);
        assert_eq!(t.records.len(), 10 * 100);
        let starts: Vec<_> = t.records.iter().filter(|r| r.batch == 7).collect();
        assert_eq!(starts.len(), 10);
        assert_eq!(starts[3].eta, 8);
        assert_eq!(starts[3].stage, Some(3));
        assert!(t.records.iter().all(|r| r.stationarity_sq.is_finite()));
    }

    #[test]
    fn stage_batch_from_target() {
        let p = noisy(2);
        let model = BoundModel::new(BoundFn::Zero, BoundFn::Constant { value: 4.0 }, 4.0, None).unwrap();
        let mut cfg = theorem7(1000, 1.0).unwrap();
        cfg.x0 = vec![0.0, 0.0];
        cfg.b0 = StageBatch::FromTarget { target: 0.1 };
        // 16 / (32 * 0.01) = 50
        assert_eq!(cfg.stage_batch(&model, lvl(1)), 50);
        cfg.b0 = StageBatch::FromTarget { target: 1e-9 };
        assert_eq!(cfg.stage_batch(&model, lvl(1)), 1_000_000);
        let _ = p;
    }
}
