//! B-SGD, AB-SG and AB-VSG for smooth objectives.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    norm_sq, sample, BatchSchedule, LevelSchedule, ParamSchedule, ProxRunConfig, Recorder, SmoothRunConfig,
    Step, StepSchedule, Trajectory, VrOption,
};
use crate::error::{Error, Result};
use crate::oracle::{invert_hb_sq, smallest_level, BiasLevel, BoundModel, CostLedger, ProblemOracle, COMPARE_SLACK};
use crate::prox::{prox_step_into, BregmanGeometry, Regularizer};
use crate::rng::{run_rng, SampleBatch};

/// `x - alpha g`, or its proximal counterpart when `phi` is nonzero.
pub(crate) fn descent_step(x: &[f64], g: &[f64], alpha: f64, phi: &Regularizer, omega: &BregmanGeometry) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    prox_step_into(x, g, alpha, phi, omega, &mut out);
    out
}

/// Smallest level in `[floor, cap]` passing `hb^2 <= gamma ||g||^2` and, when
/// `tau` is given, `q <= tau ||g||^2`.
pub(crate) fn adaptive_level(
    model: &BoundModel,
    g_norm_sq: f64,
    gamma: f64,
    tau: Option<f64>,
    floor: BiasLevel,
    cap: BiasLevel,
) -> BiasLevel {
    let a = invert_hb_sq(model, gamma * g_norm_sq, floor, cap).level;
    match (tau, &model.q) {
        (Some(t), Some(q)) => {
            let thr = t * g_norm_sq * (1.0 + COMPARE_SLACK);
            a.max(smallest_level(floor, cap, |e| q.eval(e) <= thr).level)
        }
        _ => a,
    }
}

pub(crate) struct SearchOutcome {
    pub level: BiasLevel,
    pub g: Vec<f64>,
    pub rounds: u32,
    pub converged: bool,
}

/// Fixed-point search for the circular condition `hb^2(eta) <= gamma ||g^eta||^2`.
///
/// Each round evaluates the batch from `next_batch` at the current level and
/// inverts the bound at the resulting estimate. The round is accepted when
/// the inverted level does not exceed the current one; otherwise the search
/// moves to the inverted level. The last round is accepted unconditionally.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fixed_point_search(
    problem: &dyn ProblemOracle,
    model: &BoundModel,
    x: &[f64],
    start: BiasLevel,
    gamma: f64,
    tau: Option<f64>,
    cap: BiasLevel,
    max_rounds: usize,
    k: usize,
    mut next_batch: impl FnMut() -> SampleBatch,
    mut on_eval: impl FnMut(BiasLevel, u64),
) -> Result<SearchOutcome> {
    let mut level = start.min(cap);
    let mut round = 0u32;
    loop {
        round += 1;
        let batch = next_batch();
        let g = sample(problem, x, level, &batch, k)?;
        on_eval(level, batch.size as u64);
        let target = adaptive_level(model, norm_sq(&g), gamma, tau, BiasLevel::ONE, cap);
        let converged = target <= level;
        if converged || round as usize >= max_rounds {
            return Ok(SearchOutcome {
                level,
                g,
                rounds: round,
                converged,
            });
        }
        level = target;
    }
}

/// Fixed-level biased SGD.
pub fn run_bsgd(problem: &dyn ProblemOracle, cfg: &SmoothRunConfig) -> Result<Trajectory> {
    cfg.validate(problem)?;
    let levels = cfg.eta.clone().unwrap_or(LevelSchedule::Constant { eta: cfg.eta_bar });
    let mut rng = run_rng(cfg.seed, cfg.stream);
    let mut ledger = CostLedger::new();
    let mut rec = Recorder::new(problem, Regularizer::Zero, BregmanGeometry::SquaredEuclidean, None, cfg.iterations);
    let mut x = cfg.x0.clone();
    for k in 1..=cfg.iterations {
        let i = k - 1;
        let eta = levels.at(i);
        let b = cfg.batch.at(i);
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
                saturated: eta >= cfg.eta_bar,
                estimate_norm: norm_sq(&g).sqrt(),
                search_rounds: 1,
                converged: true,
            },
            &ledger,
        );
        x = descent_step(&x, &g, cfg.step.at(i), &Regularizer::Zero, &BregmanGeometry::SquaredEuclidean);
    }
    Ok(rec.finish("bsgd", x, ledger, cfg.eta_bar))
}

/// Adaptive level chosen each iteration from the current gradient estimate.
///
/// Every search round draws a fresh batch and is charged to the ledger.
pub fn run_absg(problem: &dyn ProblemOracle, model: &BoundModel, cfg: &SmoothRunConfig) -> Result<Trajectory> {
    cfg.validate(problem)?;
    let mut rng = run_rng(cfg.seed, cfg.stream);
    let mut ledger = CostLedger::new();
    let mut rec = Recorder::new(problem, Regularizer::Zero, BregmanGeometry::SquaredEuclidean, None, cfg.iterations);
    let mut x = cfg.x0.clone();
    let mut prev = BiasLevel::ONE;
    for k in 1..=cfg.iterations {
        let i = k - 1;
        let b = cfg.batch.at(i);
        let out = fixed_point_search(
            problem,
            model,
            &x,
            prev,
            0.5,
            None,
            cfg.eta_bar,
            cfg.max_search_rounds,
            k,
            || SampleBatch::draw(&mut rng, b as usize),
            |eta, size| {
                ledger.record(k, eta, size);
            },
        )?;
        log::trace!(
            "absg k={k} eta={} rounds={} converged={} |g|={:.3e}",
            out.level,
            out.rounds,
            out.converged,
            norm_sq(&out.g).sqrt()
        );
        rec.push(
            &x,
            Step {
                k,
                stage: None,
                eta: out.level,
                batch: b,
                saturated: out.level == cfg.eta_bar,
                estimate_norm: norm_sq(&out.g).sqrt(),
                search_rounds: out.rounds,
                converged: out.converged,
            },
            &ledger,
        );
        x = descent_step(&x, &out.g, cfg.step.at(i), &Regularizer::Zero, &BregmanGeometry::SquaredEuclidean);
        prev = out.level;
    }
    Ok(rec.finish("absg", x, ledger, cfg.eta_bar))
}

/// The recursive estimator update
/// `g_next = grad^{eta_next}_B(x_next) + (1 - beta) (g_prev - grad^{eta_prev}_B(x_prev))`
/// with both evaluations on the same batch.
#[allow(clippy::too_many_arguments)]
pub fn momentum_update(
    problem: &dyn ProblemOracle,
    x_prev: &[f64],
    x_next: &[f64],
    g_prev: &[f64],
    eta_prev: BiasLevel,
    eta_next: BiasLevel,
    beta: f64,
    batch: &SampleBatch,
) -> Result<Vec<f64>> {
    let mut g = problem.sample_gradient(x_next, eta_next, batch)?.g;
    if beta != 1.0 {
        let corr = problem.sample_gradient(x_prev, eta_prev, batch)?.g;
        let w = 1.0 - beta;
        for ((gi, gp), ci) in g.iter_mut().zip(g_prev).zip(&corr) {
            *gi += w * (gp - ci);
        }
    }
    Ok(g)
}

/// Momentum-based variance reduction with an arbitrary regularizer; the smooth method is the `phi = 0` case.
pub(crate) fn run_vr_engine(
    problem: &dyn ProblemOracle,
    model: &BoundModel,
    cfg: &ProxRunConfig,
    name: &str,
) -> Result<Trajectory> {
    let base = &cfg.base;
    base.validate(problem)?;
    let beta = base
        .beta
        .as_ref()
        .ok_or_else(|| Error::config(format!("{name} needs a momentum schedule `beta`")))?;
    let tau = match base.option {
        VrOption::One => None,
        VrOption::Two => {
            if model.q.is_none() {
                return Err(Error::config("option II needs a bound model with q"));
            }
            Some(
                base.tau
                    .as_ref()
                    .ok_or_else(|| Error::config("option II needs a `tau` schedule"))?,
            )
        }
    };
    let report_alpha = report_alpha(cfg);
    let mut rng: ChaCha8Rng = run_rng(base.seed, base.stream);
    let mut ledger = CostLedger::new();
    let mut rec = Recorder::new(problem, cfg.phi, cfg.omega, report_alpha, base.iterations);
    let mut x = base.x0.clone();

    let b1 = base.first_batch.unwrap_or_else(|| base.batch.at(0));
    let batch1 = SampleBatch::draw(&mut rng, b1 as usize);
    let alpha0 = base.step.at(0);
    let first = fixed_point_search(
        problem,
        model,
        &x,
        BiasLevel::ONE,
        base.gamma.at(0, alpha0),
        tau.map(|t| t.at(0, alpha0)),
        base.eta_bar,
        base.max_search_rounds,
        1,
        || batch1,
        |_, _| {},
    )?;
    let mut eta = first.level;
    let mut g = first.g;
    ledger.record(1, eta, b1);
    rec.push(
        &x,
        Step {
            k: 1,
            stage: None,
            eta,
            batch: b1,
            saturated: eta == base.eta_bar,
            estimate_norm: norm_sq(&g).sqrt(),
            search_rounds: first.rounds,
            converged: first.converged,
        },
        &ledger,
    );

    for k in 1..=base.iterations {
        let x_next = descent_step(&x, &g, base.step.at(k - 1), &cfg.phi, &cfg.omega);
        if k == base.iterations {
            x = x_next;
            break;
        }
        // iteration k + 1 uses 0-based schedule index k
        let alpha = base.step.at(k);
        let gn2 = norm_sq(&g);
        let level = adaptive_level(
            model,
            gn2,
            base.gamma.at(k, alpha),
            tau.map(|t| t.at(k, alpha)),
            eta,
            base.eta_bar,
        );
        let b = base.batch.at(k);
        let batch = SampleBatch::draw(&mut rng, b as usize);
        g = momentum_update(problem, &x, &x_next, &g, eta, level, beta.at(k, alpha), &batch)
            .map_err(|e| e.at_iteration(k + 1))?;
        eta = level;
        x = x_next;
        ledger.record(k + 1, eta, b);
        rec.push(
            &x,
            Step {
                k: k + 1,
                stage: None,
                eta,
                batch: b,
                saturated: eta == base.eta_bar,
                estimate_norm: norm_sq(&g).sqrt(),
                search_rounds: 1,
                converged: true,
            },
            &ledger,
        );
    }
    Ok(rec.finish(name, x, ledger, base.eta_bar))
}

pub(crate) fn report_alpha(cfg: &ProxRunConfig) -> Option<f64> {
    cfg.report_alpha
        .or_else(|| cfg.base.lipschitz.map(|l| 1.0 / (2.0 * l)))
        .or_else(|| Some(cfg.base.step.at(0)))
}

/// Momentum-based variance reduction with adaptive levels.
pub fn run_abvsg(problem: &dyn ProblemOracle, model: &BoundModel, cfg: &SmoothRunConfig) -> Result<Trajectory> {
    let prox = ProxRunConfig::new(cfg.clone(), Regularizer::Zero);
    run_vr_engine(problem, model, &prox, "abvsg")
}

/// Choice of the constant `c` in the fixed-stepsize preset.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Theorem4Constant {
    /// `1/(8L)` for `B = 1`, `K^(1/3) / (8 L B^(2/3))` otherwise.
    #[default]
    Recommended,
    /// The largest value under the cap.
    Largest,
    Explicit { c: f64 },
}

/// Fixed-stepsize AB-VSG parameters: `alpha = c B^(2/3) K^(-1/3)`,
/// `beta = 64 L^2 alpha^2 / B`, `gamma = 1/16`, `tau = L^2 alpha^2 / (2 eta_bar)`.
///
/// The initial batch is `ceil(K^(1/3))` when `B = 1` and 1 otherwise. The
/// returned config has an empty `x0`.
pub fn preset_theorem4(
    lipschitz: f64,
    batch: u64,
    iterations: usize,
    eta_bar: BiasLevel,
    constant: Theorem4Constant,
) -> Result<SmoothRunConfig> {
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(Error::config("lipschitz constant must be positive"));
    }
    if batch == 0 || iterations == 0 {
        return Err(Error::config("batch and iterations must be at least 1"));
    }
    let (l, b, k) = (lipschitz, batch as f64, iterations as f64);
    let cap = k.cbrt() / (2.0 * l * b.powf(1.0 / 6.0)) * (1.0 / b.sqrt()).min(0.25);
    let c = match constant {
        Theorem4Constant::Recommended if batch == 1 => 1.0 / (8.0 * l),
        Theorem4Constant::Recommended => k.cbrt() / (8.0 * l * b.powf(2.0 / 3.0)),
        Theorem4Constant::Largest => cap,
        Theorem4Constant::Explicit { c } => c,
    };
    if !(c > 0.0) {
        return Err(Error::config(format!("constant c = {c} must be positive")));
    }
    if c > cap * (1.0 + 1e-12) {
        return Err(Error::config(format!("constant c = {c} exceeds its cap {cap}")));
    }
    let alpha = c * b.powf(2.0 / 3.0) / k.cbrt();
    let beta = 64.0 * l * l * alpha * alpha / b;
    if !(beta > 0.0 && beta <= 1.0 + 1e-12) {
        return Err(Error::config(format!(
            "momentum beta = {beta} outside (0, 1] for c = {c}, B = {batch}, K = {iterations}, L = {l}"
        )));
    }
    let beta = beta.min(1.0);
    let mut cfg = SmoothRunConfig::basic(iterations, Vec::new(), alpha, batch, eta_bar);
    cfg.first_batch = Some(if batch == 1 { k.cbrt().ceil() as u64 } else { 1 });
    cfg.beta = Some(ParamSchedule::Constant { value: beta });
    cfg.tau = Some(ParamSchedule::Constant {
        value: l * l * alpha * alpha / (2.0 * eta_bar.as_f64()),
    });
    cfg.lipschitz = Some(l);
    Ok(cfg)
}

/// Diminishing-stepsize AB-VSG parameters with `s` and `w` at their lower limits:
/// `s = 1/(6 c^3 L) + 64 L^2`, `w = max(1, 8 c^3 L^3, (s c / 2L)^3)`,
/// `alpha_i = c / (w + i)^(1/3)`, `beta_i = s alpha_i^2`, `tau_i = L^2 alpha_i^2 / (2 eta_bar)`.
pub fn preset_theorem5(lipschitz: f64, c: f64, iterations: usize, eta_bar: BiasLevel) -> Result<SmoothRunConfig> {
    if !(lipschitz > 0.0 && c > 0.0 && lipschitz.is_finite() && c.is_finite()) {
        return Err(Error::config("lipschitz constant and c must be positive"));
    }
    let l = lipschitz;
    let c3 = c * c * c;
    let s = 1.0 / (6.0 * c3 * l) + 64.0 * l * l;
    let w = 1f64.max(8.0 * c3 * l * l * l).max((s * c / (2.0 * l)).powi(3));
    let mut cfg = SmoothRunConfig::basic(iterations, Vec::new(), 1.0, 1, eta_bar);
    cfg.step = StepSchedule::Diminishing { c, w };
    cfg.batch = BatchSchedule::Constant { size: 1 };
    cfg.beta = Some(ParamSchedule::StepSquared { scale: s });
    cfg.tau = Some(ParamSchedule::StepSquared {
        scale: l * l / (2.0 * eta_bar.as_f64()),
    });
    cfg.lipschitz = Some(l);
    Ok(cfg)
}
