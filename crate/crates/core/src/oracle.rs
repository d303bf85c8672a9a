//! The biased-oracle contract shared by every algorithm and problem.
//!
//! A problem exposes gradient samples at an integer bias level `eta`. The
//! [`BoundModel`] declares how fast the bias shrinks with `eta` (`hb`), a cap on
//! the per-sample variance (`hv`, `sigma`), and optionally the variance bound
//! `q` on the difference of coupled samples at consecutive levels. The
//! [`CostLedger`] accumulates the three complexity measures: sample count
//! `sum B_k`, bias-control effort `sum eta_k` and the combined `sum eta_k B_k`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{DrawRng, SampleBatch};

/// Relative slack applied when comparing a bound against a threshold, so that
/// thresholds computed in floating point from exact values still match.
pub(crate) const COMPARE_SLACK: f64 = 1e-12;

/// Bias-control parameter: inner sample count, truncation horizon, or subsample size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct BiasLevel(u64);

impl BiasLevel {
    pub const ONE: BiasLevel = BiasLevel(1);

    pub fn new(eta: u64) -> Result<Self> {
        if eta == 0 {
            return Err(Error::domain("bias level must be at least 1"));
        }
        Ok(BiasLevel(eta))
    }

    pub fn get(self) -> u64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64
    }
}

impl TryFrom<u64> for BiasLevel {
    type Error = Error;
    fn try_from(v: u64) -> Result<Self> {
        BiasLevel::new(v)
    }
}

impl From<BiasLevel> for u64 {
    fn from(b: BiasLevel) -> u64 {
        b.0
    }
}

impl fmt::Display for BiasLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A scalar bound over bias levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BoundFn {
    Zero,
    Constant { value: f64 },
    /// `a * eta^(-p)`
    Power { a: f64, p: f64 },
    /// `a * r^eta`
    Exponential { a: f64, r: f64 },
    /// `c + a * eta^(-p)`
    OffsetPower { c: f64, a: f64, p: f64 },
    /// `(a * (eta^(-p) - (eta+1)^(-p)))^2`: the consecutive-level difference
    /// variance of a noise term whose scale follows a power law in `eta`.
    PowerGapSquared { a: f64, p: f64 },
    /// `a * gamma^eta * (eta / (1 - gamma) + 1 / (1 - gamma)^2)`: the truncated-horizon
    /// policy-gradient tail with horizon `eta - 1`.
    DiscountedTail { a: f64, gamma: f64 },
    /// Step function: the value at the nearest grid point at or below `eta`.
    /// The grid must start at 1 and be strictly increasing.
    Tabulated { etas: Vec<u64>, values: Vec<f64> },
}

impl BoundFn {
    pub fn eval(&self, eta: BiasLevel) -> f64 {
        let e = eta.as_f64();
        match self {
            BoundFn::Zero => 0.0,
            BoundFn::Constant { value } => *value,
            BoundFn::Power { a, p } => a / e.powf(*p),
            BoundFn::Exponential { a, r } => a * r.powf(e),
            BoundFn::OffsetPower { c, a, p } => c + a / e.powf(*p),
            BoundFn::PowerGapSquared { a, p } => {
                let gap = a * (1.0 / e.powf(*p) - 1.0 / (e + 1.0).powf(*p));
                gap * gap
            }
            BoundFn::DiscountedTail { a, gamma } => {
                let g1 = 1.0 - gamma;
                a * gamma.powf(e) * (e / g1 + 1.0 / (g1 * g1))
            }
            BoundFn::Tabulated { etas, values } => {
                let idx = etas.partition_point(|&g| g <= eta.get());
                values[idx.saturating_sub(1)]
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::domain(format!("bound constant {name} = {v} must be finite and >= 0")))
            }
        };
        match self {
            BoundFn::Zero => Ok(()),
            BoundFn::Constant { value } => nonneg("value", *value),
            BoundFn::Power { a, p } | BoundFn::PowerGapSquared { a, p } => {
                nonneg("a", *a)?;
                nonneg("p", *p)
            }
            BoundFn::Exponential { a, r } => {
                nonneg("a", *a)?;
                if !(*r > 0.0 && *r < 1.0) {
                    return Err(Error::domain(format!("exponential ratio r = {r} must lie in (0, 1)")));
                }
                Ok(())
            }
            BoundFn::DiscountedTail { a, gamma } => {
                nonneg("a", *a)?;
                if !(*gamma > 0.0 && *gamma < 1.0) {
                    return Err(Error::domain(format!("discount gamma = {gamma} must lie in (0, 1)")));
                }
                Ok(())
            }
            BoundFn::OffsetPower { c, a, p } => {
                nonneg("c", *c)?;
                nonneg("a", *a)?;
                nonneg("p", *p)
            }
            BoundFn::Tabulated { etas, values } => {
                if etas.is_empty() || etas.len() != values.len() {
                    return Err(Error::domain("tabulated bound needs equal-length nonempty grids"));
                }
                if etas[0] != 1 {
                    return Err(Error::domain("tabulated bound grid must start at eta = 1"));
                }
                if etas.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::domain("tabulated bound grid must be strictly increasing"));
                }
                values.iter().try_for_each(|v| nonneg("value", *v))
            }
        }
    }

    /// True when the function never increases along `grid` (sorted ascending).
    pub fn is_nonincreasing_on(&self, grid: &[BiasLevel]) -> bool {
        grid.windows(2).all(|w| self.eval(w[0]) >= self.eval(w[1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoundSource {
    #[default]
    Analytic,
    Fitted,
}

/// Declared bias/variance bounds of an oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundModel {
    pub hb: BoundFn,
    pub hv: BoundFn,
    /// Uniform cap on `hv`.
    pub sigma: f64,
    /// Consecutive-level difference variance `q(eta) = q(eta, eta + 1)`.
    #[serde(default)]
    pub q: Option<BoundFn>,
    #[serde(default)]
    pub source: BoundSource,
}

impl BoundModel {
    pub fn new(hb: BoundFn, hv: BoundFn, sigma: f64, q: Option<BoundFn>) -> Result<Self> {
        let model = Self {
            hb,
            hv,
            sigma,
            q,
            source: BoundSource::Analytic,
        };
        model.validate()?;
        Ok(model)
    }

    /// Bounds of an exact oracle: no bias, no variance.
    pub fn exact() -> Self {
        Self {
            hb: BoundFn::Zero,
            hv: BoundFn::Zero,
            sigma: 0.0,
            q: Some(BoundFn::Zero),
            source: BoundSource::Analytic,
        }
    }

    pub fn with_source(mut self, source: BoundSource) -> Self {
        self.source = source;
        self
    }

    pub fn hb(&self, eta: BiasLevel) -> f64 {
        self.hb.eval(eta)
    }

    pub fn hv(&self, eta: BiasLevel) -> f64 {
        self.hv.eval(eta)
    }

    pub fn q(&self, eta: BiasLevel) -> Option<f64> {
        self.q.as_ref().map(|q| q.eval(eta))
    }

    pub fn validate(&self) -> Result<()> {
        self.hb.validate()?;
        self.hv.validate()?;
        if let Some(q) = &self.q {
            q.validate()?;
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::domain(format!("sigma = {} must be finite and >= 0", self.sigma)));
        }
        let grid = log_grid(10_000, 20);
        self.check_on_grid(&grid)
    }

    /// Checks monotonicity of `hb` and the `sigma` cap of `hv` on a grid.
    pub fn check_on_grid(&self, grid: &[BiasLevel]) -> Result<()> {
        if !self.hb.is_nonincreasing_on(grid) {
            return Err(Error::domain("hb must be nonincreasing in eta"));
        }
        let cap = self.sigma * (1.0 + COMPARE_SLACK);
        if let Some(eta) = grid.iter().find(|&&e| self.hv(e) > cap) {
            return Err(Error::domain(format!(
                "hv({eta}) = {} exceeds sigma = {}",
                self.hv(*eta),
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Integer grid from 1 to `max`, roughly `per_decade` points per decade, deduplicated.
pub fn log_grid(max: u64, per_decade: usize) -> Vec<BiasLevel> {
    let mut out: Vec<u64> = vec![1];
    let steps = ((max as f64).log10() * per_decade as f64).ceil() as usize;
    for i in 1..=steps {
        let v = 10f64.powf(i as f64 / per_decade as f64).round() as u64;
        let v = v.min(max);
        if v > *out.last().unwrap() {
            out.push(v);
        }
    }
    out.into_iter().map(BiasLevel).collect()
}

/// Result of inverting a bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inversion {
    pub level: BiasLevel,
    /// Set when no level up to the cap satisfies the bound.
    pub saturated: bool,
}

/// Smallest `eta` in `[floor, cap]` for which `pred` holds, assuming `pred` is
/// monotone (false up to some level, true afterwards). Returns `cap` with the
/// saturation flag if it never holds.
pub(crate) fn smallest_level(
    floor: BiasLevel,
    cap: BiasLevel,
    pred: impl Fn(BiasLevel) -> bool,
) -> Inversion {
    let floor = floor.min(cap);
    if pred(floor) {
        return Inversion { level: floor, saturated: false };
    }
    if !pred(cap) {
        return Inversion { level: cap, saturated: true };
    }
    // pred(lo) false, pred(hi) true
    let (mut lo, mut hi) = (floor.get(), cap.get());
    let mut probe = floor.get();
    while probe < cap.get() {
        let next = probe.saturating_mul(2).min(cap.get());
        if pred(BiasLevel(next)) {
            hi = next;
            break;
        }
        lo = next;
        probe = next;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if pred(BiasLevel(mid)) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Inversion { level: BiasLevel(hi), saturated: false }
}

/// Smallest level in `[1, eta_max]` with `hb(eta) <= target`.
pub fn invert_hb(model: &BoundModel, target: f64, eta_max: BiasLevel) -> Result<Inversion> {
    if !(target > 0.0) {
        return Err(Error::domain(format!("inversion target must be positive, got {target}")));
    }
    let thr = target * (1.0 + COMPARE_SLACK);
    Ok(smallest_level(BiasLevel::ONE, eta_max, |e| model.hb(e) <= thr))
}

/// Smallest level in `[floor, cap]` with `hb(eta)^2 <= threshold_sq`. A zero
/// threshold is allowed and is met only where `hb` vanishes.
pub(crate) fn invert_hb_sq(
    model: &BoundModel,
    threshold_sq: f64,
    floor: BiasLevel,
    cap: BiasLevel,
) -> Inversion {
    let thr = threshold_sq * (1.0 + COMPARE_SLACK);
    smallest_level(floor, cap, |e| {
        let h = model.hb(e);
        h * h <= thr
    })
}

/// `hb(eta)^2 + hv(eta)^2`: mean-square error bound of one sample.
pub fn combined_error_bound(model: &BoundModel, eta: BiasLevel) -> f64 {
    let b = model.hb(eta);
    let v = model.hv(eta);
    b * b + v * v
}

/// A mini-batch gradient estimate together with what it cost.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub g: Vec<f64>,
    pub eta: BiasLevel,
    pub batch: u64,
    /// Elementary samples consumed: `cost(eta) * batch`.
    pub cost_units: u64,
}

impl GradientEstimate {
    pub fn norm_sq(&self) -> f64 {
        self.g.iter().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub k: usize,
    pub eta: u64,
    pub batch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub samples: u64,
    pub eta: u64,
    pub eta_b: u64,
}

/// Cumulative complexity accounting.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostLedger {
    totals: LedgerTotals,
    records: Vec<LedgerRecord>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, k: usize, eta: BiasLevel, batch: u64) -> &mut Self {
        debug_assert!(batch >= 1);
        self.totals.samples += batch;
        self.totals.eta += eta.get();
        self.totals.eta_b += eta.get() * batch;
        self.records.push(LedgerRecord { k, eta: eta.get(), batch });
        self
    }

    /// Appends another ledger's records in order.
    pub fn extend(&mut self, other: &CostLedger) {
        for r in &other.records {
            self.record(r.k, BiasLevel(r.eta), r.batch);
        }
    }

    pub fn totals(&self) -> LedgerTotals {
        self.totals
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }
}

/// Objective value, flagged when it is only a Monte Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub exact: bool,
}

/// A problem reachable only through a bias-controllable stochastic gradient oracle.
///
/// Implementors provide one draw at a time; each draw receives its own
/// generator so that a batch evaluated twice (at different points or levels)
/// reuses the same elementary randomness.
pub trait ProblemOracle: Send + Sync {
    fn name(&self) -> &str;

    fn dimension(&self) -> usize;

    /// Elementary samples consumed by one draw at level `eta`.
    fn cost(&self, eta: BiasLevel) -> u64;

    /// Largest admissible level, if the problem has one.
    fn max_level(&self) -> Option<BiasLevel> {
        None
    }

    /// One stochastic gradient draw at level `eta`, written into `out`.
    fn draw_gradient(&self, x: &[f64], eta: BiasLevel, rng: &mut DrawRng, out: &mut [f64]) -> Result<()>;

    /// Reference gradient used for reporting and tests.
    fn exact_gradient(&self, x: &[f64]) -> Option<Vec<f64>>;

    fn objective(&self, x: &[f64]) -> Objective;

    fn check_level(&self, eta: BiasLevel) -> Result<()> {
        match self.max_level() {
            Some(max) if eta > max => Err(Error::domain(format!(
                "bias level {eta} exceeds the maximum {max} of {}",
                self.name()
            ))),
            _ => Ok(()),
        }
    }

    /// Mean of the draws of `batch` at `(x, eta)`.
    fn sample_gradient(&self, x: &[f64], eta: BiasLevel, batch: &SampleBatch) -> Result<GradientEstimate> {
        if batch.size == 0 {
            return Err(Error::domain("batch size must be at least 1"));
        }
        if x.len() != self.dimension() {
            return Err(Error::domain(format!(
                "point has dimension {}, problem expects {}",
                x.len(),
                self.dimension()
            )));
        }
        self.check_level(eta)?;
        let d = self.dimension();
        let mut sum = vec![0.0; d];
        let mut draw = vec![0.0; d];
        for mut rng in batch.draw_rngs() {
            self.draw_gradient(x, eta, &mut rng, &mut draw)?;
            for (s, v) in sum.iter_mut().zip(&draw) {
                *s += v;
            }
        }
        let inv = 1.0 / batch.size as f64;
        sum.iter_mut().for_each(|s| *s *= inv);
        if let Some(bad) = sum.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite gradient component {bad}")));
        }
        Ok(GradientEstimate {
            g: sum,
            eta,
            batch: batch.size as u64,
            cost_units: self.cost(eta) * batch.size as u64,
        })
    }
}

/// Draws a fresh batch from `rng` and evaluates it.
pub fn sample_gradient_with<P, R>(
    problem: &P,
    x: &[f64],
    eta: BiasLevel,
    batch_size: usize,
    rng: &mut R,
) -> Result<GradientEstimate>
where
    P: ProblemOracle + ?Sized,
    R: Rng + ?Sized,
{
    let batch = SampleBatch::draw(rng, batch_size);
    problem.sample_gradient(x, eta, &batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lvl(e: u64) -> BiasLevel {
        BiasLevel::new(e).unwrap()
    }

    fn power_model(a: f64, p: f64) -> BoundModel {
        BoundModel::new(BoundFn::Power { a, p }, BoundFn::Constant { value: 1.0 }, 1.0, None).unwrap()
    }

    #[test]
    fn invert_power_law() {
        let m = power_model(1.0, 0.5);
        let inv = invert_hb(&m, 0.1, lvl(1_000_000)).unwrap();
        assert_eq!(inv, Inversion { level: lvl(100), saturated: false });
    }

    #[test]
    fn invert_exponential() {
        let m = BoundModel::new(
            BoundFn::Exponential { a: 1.0, r: 0.5 },
            BoundFn::Zero,
            0.0,
            None,
        )
        .unwrap();
        assert_eq!(invert_hb(&m, 0.25, lvl(1_000_000)).unwrap().level, lvl(2));
    }

    #[test]
    fn invert_already_satisfied() {
        let m = power_model(1.0, 0.5);
        assert_eq!(invert_hb(&m, 2.0, lvl(1_000_000)).unwrap().level, lvl(1));
    }

    #[test]
    fn invert_saturates() {
        let m = power_model(1.0, 0.5);
        let inv = invert_hb(&m, 1e-6, lvl(1000)).unwrap();
        assert_eq!(inv, Inversion { level: lvl(1000), saturated: true });
    }

    #[test]
    fn invert_rejects_nonpositive_target() {
        let m = power_model(1.0, 0.5);
        assert!(matches!(invert_hb(&m, 0.0, lvl(10)), Err(Error::Domain(_))));
        assert!(matches!(invert_hb(&m, -1.0, lvl(10)), Err(Error::Domain(_))));
    }

    #[test]
    fn combined_error() {
        let m = BoundModel::new(
            BoundFn::Constant { value: 0.3 },
            BoundFn::Constant { value: 0.4 },
            0.4,
            None,
        )
        .unwrap();
        assert!((combined_error_bound(&m, lvl(3)) - 0.25).abs() < 1e-15);
        assert_eq!(combined_error_bound(&BoundModel::exact(), lvl(3)), 0.0);
        assert!((combined_error_bound(&power_model(1.0, 0.5), lvl(4)) - 1.25).abs() < 1e-15);
    }

    #[test]
    fn ledger_totals() {
        let mut l = CostLedger::new();
        l.record(1, lvl(5), 2);
        assert_eq!(l.totals(), LedgerTotals { samples: 2, eta: 5, eta_b: 10 });
        l.record(2, lvl(3), 4);
        assert_eq!(l.totals(), LedgerTotals { samples: 6, eta: 8, eta_b: 22 });

        let mut c = CostLedger::new();
        for k in 1..=7 {
            c.record(k, lvl(300), 50);
        }
        assert_eq!(c.totals(), LedgerTotals { samples: 350, eta: 2100, eta_b: 105_000 });
    }

    #[test]
    fn tabulated_is_step_from_below() {
        let f = BoundFn::Tabulated {
            etas: vec![1, 10, 100],
            values: vec![1.0, 0.5, 0.1],
        };
        f.validate().unwrap();
        assert_eq!(f.eval(lvl(1)), 1.0);
        assert_eq!(f.eval(lvl(9)), 1.0);
        assert_eq!(f.eval(lvl(10)), 0.5);
        assert_eq!(f.eval(lvl(5000)), 0.1);
        let bad = BoundFn::Tabulated { etas: vec![2, 3], values: vec![1.0, 0.5] };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn builtin_families_are_monotone() {
        let grid = log_grid(10_000, 20);
        let fams = [
            BoundFn::Power { a: 3.0, p: 0.5 },
            BoundFn::Exponential { a: 2.0, r: 0.9 },
            BoundFn::Constant { value: 1.0 },
            BoundFn::OffsetPower { c: 1.0, a: 1.0, p: 1.0 },
            BoundFn::PowerGapSquared { a: 2.0, p: 1.0 },
            BoundFn::DiscountedTail { a: 1.0, gamma: 0.9 },
            BoundFn::DiscountedTail { a: 1.0, gamma: 0.99 },
        ];
        for f in &fams {
            assert!(f.is_nonincreasing_on(&grid), "{f:?}");
        }
        let m = BoundModel::new(
            BoundFn::Power { a: 1.0, p: 0.5 },
            BoundFn::OffsetPower { c: 1.0, a: 1.0, p: 1.0 },
            2.0,
            None,
        )
        .unwrap();
        assert!(m.check_on_grid(&grid).is_ok());
        let over = BoundModel {
            sigma: 1.5,
            ..m
        };
        assert!(over.check_on_grid(&grid).is_err());
    }

    #[test]
    fn model_rejects_increasing_hb() {
        let r = BoundModel::new(BoundFn::Power { a: 1.0, p: -0.5 }, BoundFn::Zero, 0.0, None);
        assert!(r.is_err());
    }

    #[test]
    fn bias_level_rejects_zero() {
        assert!(BiasLevel::new(0).is_err());
        assert!(serde_json::from_str::<BiasLevel>("0").is_err());
        assert_eq!(serde_json::from_str::<BiasLevel>("4").unwrap(), lvl(4));
    }

    proptest! {
        #[test]
        fn inversion_is_minimal(a in 0.1f64..10.0, p in 0.1f64..2.0, target in 1e-3f64..5.0) {
            let m = power_model(a, p);
            let cap = lvl(1_000_000);
            let inv = invert_hb(&m, target, cap).unwrap();
            if !inv.saturated {
                prop_assert!(m.hb(inv.level) <= target * (1.0 + COMPARE_SLACK));
                if inv.level.get() > 1 {
                    prop_assert!(m.hb(lvl(inv.level.get() - 1)) > target);
                }
            }
        }

        #[test]
        fn ledger_concatenation_is_additive(
            a in proptest::collection::vec((1u64..500, 1u64..64), 0..20),
            b in proptest::collection::vec((1u64..500, 1u64..64), 0..20),
        ) {
            let mut la = CostLedger::new();
            for (k, (e, bs)) in a.iter().enumerate() { la.record(k, lvl(*e), *bs); }
            let mut lb = CostLedger::new();
            for (k, (e, bs)) in b.iter().enumerate() { lb.record(k, lvl(*e), *bs); }
            let mut seq = CostLedger::new();
            for (k, (e, bs)) in a.iter().enumerate() { seq.record(k, lvl(*e), *bs); }
            for (k, (e, bs)) in b.iter().enumerate() { seq.record(k, lvl(*e), *bs); }
            let mut cat = la.clone();
            cat.extend(&lb);
            prop_assert_eq!(cat.totals(), seq.totals());
            prop_assert_eq!(cat.totals().eta_b, la.totals().eta_b + lb.totals().eta_b);
        }
    }
}
