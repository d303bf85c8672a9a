//! Monte Carlo estimation of bias and variance curves, and parametric decay fits.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{BiasLevel, BoundFn, BoundModel, BoundSource, ProblemOracle};
use crate::rng::{derive_rng, SampleBatch};

/// What the samples at level `eta` are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reference {
    /// The problem's exact gradient.
    #[default]
    Exact,
    /// Draws at `eta_ref` sharing each sample's randomness. For prefix-coupled
    /// oracles this removes the common noise from the bias estimate.
    Coupled { eta_ref: BiasLevel },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveEstimate {
    pub etas: Vec<u64>,
    /// Largest norm of the mean deviation over the probe points.
    pub bias: Vec<f64>,
    /// Standard error at the maximizing probe point.
    pub bias_se: Vec<f64>,
    /// Which probe point attained `bias`.
    pub bias_probe: Vec<usize>,
    /// Largest trace of the per-point sample covariance.
    pub variance: Vec<f64>,
    pub variance_se: Vec<f64>,
    pub variance_probe: Vec<usize>,
    pub replications: usize,
    pub probes: Vec<Vec<f64>>,
    pub reference: Reference,
}

impl CurveEstimate {
    /// Square root of the largest variance on the grid.
    pub fn sigma_estimate(&self) -> f64 {
        self.variance.iter().cloned().fold(0.0, f64::max).sqrt()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("eta,bias,bias_se,bias_probe,variance,variance_se,variance_probe\n");
        for i in 0..self.etas.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.etas[i],
                self.bias[i],
                self.bias_se[i],
                self.bias_probe[i],
                self.variance[i],
                self.variance_se[i],
                self.variance_probe[i]
            ));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

struct CellStats {
    bias: f64,
    bias_se: f64,
    variance: f64,
    variance_se: f64,
}

/// Estimates bias and variance at every `(eta, probe)` pair from `m` draws each.
///
/// Cell `(i, p)` uses the stream derived from `(seed, i, p)`, so the result
/// does not depend on how cells are scheduled.
///
/// `bias_se` is `sqrt(tr Cov / m)` of the per-draw deviations, an upper bound
/// on the root mean squared error of the estimated bias vector.
pub fn estimate_curves(
    problem: &dyn ProblemOracle,
    probes: &[Vec<f64>],
    etas: &[BiasLevel],
    m: usize,
    reference: Reference,
    seed: u64,
) -> Result<CurveEstimate> {
    if m < 100 {
        return Err(Error::config(format!("at least 100 replications are needed, got {m}")));
    }
    if probes.is_empty() || etas.is_empty() {
        return Err(Error::config("need at least one probe point and one level"));
    }
    if etas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("level grid must be strictly increasing"));
    }
    let d = problem.dimension();
    if let Some(p) = probes.iter().find(|p| p.len() != d) {
        return Err(Error::config(format!("probe point has dimension {}, expected {d}", p.len())));
    }
    for &e in etas {
        problem.check_level(e)?;
    }
    let exact: Vec<Vec<f64>> = match reference {
        Reference::Exact => probes
            .iter()
            .map(|x| {
                problem
                    .exact_gradient(x)
                    .ok_or(Error::Unsupported("bias estimation needs an exact gradient"))
            })
            .collect::<Result<_>>()?,
        Reference::Coupled { eta_ref } => {
            problem.check_level(eta_ref)?;
            Vec::new()
        }
    };

    let cells: Vec<(usize, usize)> = (0..etas.len()).flat_map(|i| (0..probes.len()).map(move |p| (i, p))).collect();
    let stats: Vec<CellStats> = cells
        .par_iter()
        .map(|&(i, p)| {
            let mut rng = derive_rng(seed, i as u32, p as u32);
            let batch = SampleBatch::draw(&mut rng, m);
            let x = &probes[p];
            let r = match reference {
                Reference::Exact => RefKind::Vector(&exact[p]),
                Reference::Coupled { eta_ref } => RefKind::Coupled(eta_ref),
            };
            cell_stats(problem, x, etas[i], &batch, r)
        })
        .collect::<Result<_>>()?;

    let np = probes.len();
    let mut est = CurveEstimate {
        etas: etas.iter().map(|e| e.get()).collect(),
        bias: Vec::new(),
        bias_se: Vec::new(),
        bias_probe: Vec::new(),
        variance: Vec::new(),
        variance_se: Vec::new(),
        variance_probe: Vec::new(),
        replications: m,
        probes: probes.to_vec(),
        reference,
    };
    for row in stats.chunks(np) {
        let bp = argmax(row.iter().map(|c| c.bias));
        let vp = argmax(row.iter().map(|c| c.variance));
        est.bias.push(row[bp].bias);
        est.bias_se.push(row[bp].bias_se);
        est.bias_probe.push(bp);
        est.variance.push(row[vp].variance);
        est.variance_se.push(row[vp].variance_se);
        est.variance_probe.push(vp);
    }
    Ok(est)
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

enum RefKind<'a> {
    Vector(&'a [f64]),
    Coupled(BiasLevel),
}

fn cell_stats(problem: &dyn ProblemOracle, x: &[f64], eta: BiasLevel, batch: &SampleBatch, r: RefKind) -> Result<CellStats> {
    let d = problem.dimension();
    let m = batch.size;
    let mut samples = vec![0.0; m * d];
    let mut dev = vec![0.0; m * d];
    let mut g_ref = vec![0.0; d];
    for (j, draw) in batch.draw_rngs().enumerate() {
        let mut rng: ChaCha8Rng = draw.clone();
        let g = &mut samples[j * d..(j + 1) * d];
        problem.draw_gradient(x, eta, &mut rng, g)?;
        match r {
            RefKind::Vector(v) => g_ref.copy_from_slice(v),
            RefKind::Coupled(eta_ref) => {
                let mut rng = draw;
                problem.draw_gradient(x, eta_ref, &mut rng, &mut g_ref)?;
            }
        }
        for k in 0..d {
            dev[j * d + k] = g[k] - g_ref[k];
        }
    }
    if samples.iter().chain(&dev).any(|v| !v.is_finite()) {
        return Err(Error::domain(format!("non-finite draw at level {eta}")));
    }
    let (dev_mean, dev_trace) = mean_and_trace(&dev, d);
    let (g_mean, _) = mean_and_trace(&samples, d);
    let sq: Vec<f64> = samples
        .chunks(d)
        .map(|g| g.iter().zip(&g_mean).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let mf = m as f64;
    let variance = sq.iter().sum::<f64>() / mf;
    let var_of_sq = sq.iter().map(|s| (s - variance) * (s - variance)).sum::<f64>() / (mf - 1.0);
    Ok(CellStats {
        bias: dev_mean.iter().map(|v| v * v).sum::<f64>().sqrt(),
        bias_se: (dev_trace / mf).sqrt(),
        variance,
        variance_se: (var_of_sq / mf).sqrt(),
    })
}

/// Component means and the trace of the unbiased sample covariance of rows of width `d`.
fn mean_and_trace(rows: &[f64], d: usize) -> (Vec<f64>, f64) {
    let m = rows.len() / d;
    let mut mean = vec![0.0; d];
    for row in rows.chunks(d) {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let ss: f64 = rows
        .chunks(d)
        .map(|row| row.iter().zip(&mean).map(|(v, a)| (v - a) * (v - a)).sum::<f64>())
        .sum();
    (mean, ss / (m as f64 - 1.0).max(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFamily {
    Power,
    Exponential,
}

/// `a eta^(-p)` or `a r^eta`, with goodness measured as R^2 in the transformed space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub family: FitFamily,
    pub a: f64,
    /// `p` for the power family, `r` for the exponential one.
    pub rate: f64,
    pub goodness: f64,
    pub points: usize,
}

impl FitResult {
    pub fn bound_fn(&self, scale: f64) -> BoundFn {
        match self.family {
            FitFamily::Power => BoundFn::Power {
                a: self.a * scale,
                p: self.rate,
            },
            FitFamily::Exponential => BoundFn::Exponential {
                a: self.a * scale,
                r: self.rate,
            },
        }
    }

    pub fn eval(&self, eta: f64) -> f64 {
        match self.family {
            FitFamily::Power => self.a * eta.powf(-self.rate),
            FitFamily::Exponential => self.a * self.rate.powf(eta),
        }
    }
}

fn positive_points(etas: &[f64], values: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if etas.len() != values.len() {
        return Err(Error::Fit(format!("{} levels but {} values", etas.len(), values.len())));
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (&e, &v) in etas.iter().zip(values) {
        if v > 0.0 && v.is_finite() && e > 0.0 {
            xs.push(e);
            ys.push(v);
        } else {
            log::warn!("dropping curve point eta={e}, value={v}");
        }
    }
    if xs.len() < 3 {
        return Err(Error::Fit(format!("{} positive points, need at least 3", xs.len())));
    }
    Ok((xs, ys))
}

/// Ordinary least squares `y = c0 + c1 x`, returning `(c0, c1, r2)`.
fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let icpt = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    (icpt, slope, r2)
}

/// Least squares of `ln v` on `ln eta`.
pub fn fit_power_points(etas: &[f64], values: &[f64]) -> Result<FitResult> {
    let (xs, ys) = positive_points(etas, values)?;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let (c0, c1, r2) = linear_fit(&lx, &ly);
    if !(c1 < 0.0) {
        return Err(Error::Fit(format!("curve does not decay in log-log space (slope {c1})")));
    }
    Ok(FitResult {
        family: FitFamily::Power,
        a: c0.exp(),
        rate: -c1,
        goodness: r2,
        points: xs.len(),
    })
}

/// Least squares of `ln v` on `eta`.
pub fn fit_exponential_points(etas: &[f64], values: &[f64]) -> Result<FitResult> {
    let (xs, ys) = positive_points(etas, values)?;
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let (c0, c1, r2) = linear_fit(&xs, &ly);
    if !(c1 < 0.0) {
        return Err(Error::Fit(format!("curve does not decay in log-linear space (slope {c1})")));
    }
    Ok(FitResult {
        family: FitFamily::Exponential,
        a: c0.exp(),
        rate: c1.exp(),
        goodness: r2,
        points: xs.len(),
    })
}

fn curve_xy(curve: &CurveEstimate) -> Vec<f64> {
    curve.etas.iter().map(|&e| e as f64).collect()
}

/// Power-law fit of the bias curve.
pub fn fit_power_law(curve: &CurveEstimate) -> Result<FitResult> {
    fit_power_points(&curve_xy(curve), &curve.bias)
}

/// Exponential fit of the bias curve.
pub fn fit_exponential(curve: &CurveEstimate) -> Result<FitResult> {
    fit_exponential_points(&curve_xy(curve), &curve.bias)
}

/// The fit with the higher goodness; ties go to `first`.
pub fn select_model(first: FitResult, second: FitResult) -> FitResult {
    if second.goodness > first.goodness {
        second
    } else {
        first
    }
}

/// Fits both families to the bias curve and keeps the better one. A family
/// whose fit fails is skipped.
pub fn fit_best(curve: &CurveEstimate) -> Result<FitResult> {
    match (fit_power_law(curve), fit_exponential(curve)) {
        (Ok(p), Ok(e)) => Ok(select_model(p, e)),
        (Ok(f), Err(_)) | (Err(_), Ok(f)) => Ok(f),
        (Err(e), Err(_)) => Err(e),
    }
}

/// Bound model with `hb = safety * fit` and constant `hv = safety * sigma_estimate`.
/// No `q` is attached, so the result only supports Option I.
pub fn build_bound_model(fit: &FitResult, sigma_estimate: f64, safety: f64) -> Result<BoundModel> {
    if !(safety > 0.0 && safety.is_finite()) {
        return Err(Error::config("safety factor must be positive"));
    }
    if !(sigma_estimate >= 0.0 && sigma_estimate.is_finite()) {
        return Err(Error::config("sigma estimate must be finite and nonnegative"));
    }
    let sigma = sigma_estimate * safety;
    Ok(BoundModel::new(fit.bound_fn(safety), BoundFn::Constant { value: sigma }, sigma, None)?
        .with_source(BoundSource::Fitted))
}

/// Settings of a fitting run, as stored in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    /// Grid `1, 2, 4, ...` up to this level.
    #[serde(default = "default_grid_max")]
    pub grid_max: u64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    /// Probe points; when empty, three points around the initial point are drawn.
    #[serde(default)]
    pub probes: Vec<Vec<f64>>,
    #[serde(default = "default_probe_count")]
    pub probe_count: usize,
    #[serde(default = "default_probe_radius")]
    pub probe_radius: f64,
    #[serde(default)]
    pub reference: Reference,
    #[serde(default = "default_safety")]
    pub safety: f64,
    /// Restrict the fit to one family instead of choosing by goodness.
    #[serde(default)]
    pub family: Option<FitFamily>,
}

fn default_grid_max() -> u64 {
    256
}
fn default_replications() -> usize {
    10_000
}
fn default_probe_count() -> usize {
    3
}
fn default_probe_radius() -> f64 {
    0.1
}
fn default_safety() -> f64 {
    1.5
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            grid_max: default_grid_max(),
            replications: default_replications(),
            probes: Vec::new(),
            probe_count: default_probe_count(),
            probe_radius: default_probe_radius(),
            reference: Reference::Exact,
            safety: default_safety(),
            family: None,
        }
    }
}

/// `1, 2, 4, ...` up to and including `max` if it is a power of two.
pub fn doubling_grid(max: u64) -> Vec<BiasLevel> {
    let mut out = Vec::new();
    let mut e = 1u64;
    while e <= max {
        out.push(BiasLevel::new(e).expect("positive"));
        match e.checked_mul(2) {
            Some(n) => e = n,
            None => break,
        }
    }
    out
}

/// Output of [`fit_problem`]: the model and everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: BoundModel,
    pub fit: FitResult,
    pub alternatives: Vec<FitResult>,
    pub curve: CurveEstimate,
    pub settings: FitSettings,
    pub seed: u64,
}

/// Runs the whole pipeline: probes, curves, fits and the bound model.
pub fn fit_problem(problem: &dyn ProblemOracle, center: &[f64], settings: &FitSettings, seed: u64) -> Result<FitReport> {
    let probes = if settings.probes.is_empty() {
        probe_points(center, settings.probe_count, settings.probe_radius, seed)
    } else {
        settings.probes.clone()
    };
    let mut grid = doubling_grid(settings.grid_max);
    if let Some(max) = problem.max_level() {
        grid.retain(|e| *e <= max);
    }
    let curve = estimate_curves(problem, &probes, &grid, settings.replications, settings.reference, seed)?;
    let alternatives: Vec<FitResult> = [fit_power_law(&curve), fit_exponential(&curve)]
        .into_iter()
        .filter_map(|r| r.ok())
        .collect();
    let fit = match settings.family {
        Some(FitFamily::Power) => fit_power_law(&curve)?,
        Some(FitFamily::Exponential) => fit_exponential(&curve)?,
        None => fit_best(&curve)?,
    };
    let model = build_bound_model(&fit, curve.sigma_estimate(), settings.safety)?;
    log::info!(
        "fitted {:?} a={:.4e} rate={:.4} R2={:.4} sigma={:.4e}",
        fit.family,
        fit.a,
        fit.rate,
        fit.goodness,
        model.sigma
    );
    Ok(FitReport {
        model,
        fit,
        alternatives,
        curve,
        settings: settings.clone(),
        seed,
    })
}

/// `center` followed by `count - 1` Gaussian perturbations of scale `radius`.
pub fn probe_points(center: &[f64], count: usize, radius: f64, seed: u64) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut out = vec![center.to_vec()];
    for _ in 1..count.max(1) {
        out.push(
            center
                .iter()
                .map(|c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    c + radius * z
                })
                .collect(),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::synthetic::{BiasProfile, SyntheticOracle, SyntheticSpec};

    #[test]
    fn exact_power_points() {
        let f = fit_power_points(&[1.0, 4.0, 16.0], &[1.0, 0.5, 0.25]).unwrap();
        assert_eq!(f.family, FitFamily::Power);
        assert!((f.a - 1.0).abs() < 1e-12 && (f.rate - 0.5).abs() < 1e-12);
        assert!((f.goodness - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_exponential_points() {
        let f = fit_exponential_points(&[1.0, 2.0, 3.0], &[0.5, 0.25, 0.125]).unwrap();
        assert!((f.a - 1.0).abs() < 1e-12 && (f.rate - 0.5).abs() < 1e-12);
        assert!((f.goodness - 1.0).abs() < 1e-12);
        let p = fit_power_points(&[1.0, 2.0, 3.0], &[0.5, 0.25, 0.125]).unwrap();
        assert_eq!(select_model(p, f).family, FitFamily::Exponential);
    }

    #[test]
    fn nonpositive_points_dropped() {
        assert!(fit_power_points(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, -1.0, 0.1]).is_err());
        let f = fit_power_points(&[1.0, 2.0, 4.0, 8.0], &[1.0, 0.0, 0.5, 0.25 * 2f64.sqrt()]).unwrap();
        assert_eq!(f.points, 3);
    }

    #[test]
    fn bound_model_scaling() {
        let f = FitResult {
            family: FitFamily::Power,
            a: 1.0,
            rate: 0.5,
            goodness: 1.0,
            points: 3,
        };
        let m = build_bound_model(&f, 2.0, 1.5).unwrap();
        assert!((m.hb(BiasLevel::new(4).unwrap()) - 0.75).abs() < 1e-15);
        assert_eq!(m.sigma, 3.0);
        assert!(m.q.is_none());
        let m1 = build_bound_model(&f, 2.0, 1.0).unwrap();
        assert_eq!(m1.hb(BiasLevel::new(9).unwrap()), f.eval(9.0));
    }

    #[test]
    fn zero_noise_curves_vanish() {
        let p = SyntheticOracle::new(&SyntheticSpec::diagonal(&[1.0, 2.0], BiasProfile::Power { a: 0.0, p: 0.5 }, 0.0)).unwrap();
        let c = estimate_curves(&p, &[vec![1.0, 1.0]], &doubling_grid(16), 100, Reference::Exact, 3).unwrap();
        assert!(c.bias.iter().all(|b| *b < 1e-12));
        assert!(c.variance.iter().all(|v| *v < 1e-24));
    }

    #[test]
    fn rejects_small_m() {
        let p = SyntheticOracle::new(&SyntheticSpec::diagonal(&[1.0], BiasProfile::Power { a: 1.0, p: 0.5 }, 0.1)).unwrap();
        assert!(matches!(
            estimate_curves(&p, &[vec![0.0]], &doubling_grid(4), 99, Reference::Exact, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn doubling() {
        let g: Vec<u64> = doubling_grid(256).iter().map(|e| e.get()).collect();
        assert_eq!(g, vec![1, 2, 4, 8, 16, 32, 64, 128, 256]);
    }
}
