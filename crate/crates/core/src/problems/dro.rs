//! Distributionally robust logistic regression.
//!
//! The objective is `max_{q in U} sum_i q_i l(x; a_i, y_i)` over the full
//! dataset. Level `eta = n` subsamples `n` points without replacement, solves
//! the inner maximization on the subsample and returns `sum_i q*_i grad l_i`.
//! Subsampling biases the estimate; `n = N` removes the bias.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{BiasLevel, Objective, ProblemOracle};
use crate::rng::DrawRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroDataset {
    /// One row per point.
    pub features: Vec<Vec<f64>>,
    /// Labels in `{-1, +1}`.
    pub labels: Vec<f64>,
}

impl DroDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(Error::domain("dataset needs at least two points"));
        }
        let d = self.dimension();
        if d == 0 || self.features.len() != self.len() || self.features.iter().any(|r| r.len() != d) {
            return Err(Error::domain("dataset rows have inconsistent lengths"));
        }
        if self.features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::domain("dataset has non-finite features"));
        }
        if self.labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::domain("labels must be +1 or -1"));
        }
        Ok(())
    }

    /// Writes a header row `x1,...,xd,label` followed by one line per point.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let header: Vec<String> = (1..=self.dimension()).map(|i| format!("x{i}")).chain(["label".to_string()]).collect();
        let mut text = header.join(",");
        text.push('\n');
        for (row, y) in self.features.iter().zip(&self.labels) {
            for v in row {
                text.push_str(&format!("{v},"));
            }
            text.push_str(&format!("{y}\n"));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let vals: std::result::Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
            let mut vals = vals.map_err(|e| Error::Csv {
                path: path.into(),
                line: i + 1,
                message: e.to_string(),
            })?;
            let y = vals.pop().ok_or_else(|| Error::Csv {
                path: path.into(),
                line: i + 1,
                message: "empty row".into(),
            })?;
            features.push(vals);
            labels.push(y);
        }
        let ds = Self { features, labels };
        ds.validate().map_err(|e| Error::Csv {
            path: path.into(),
            line: 0,
            message: e.to_string(),
        })?;
        Ok(ds)
    }
}

/// Two Gaussian clusters at `+-mu` with `||mu|| = 2` and unit covariance;
/// each label is flipped with probability `flip_prob`.
pub fn make_synthetic_dataset(n: usize, d: usize, flip_prob: f64, seed: u64) -> DroDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = 2.0 / (d as f64).sqrt();
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let row: Vec<f64> = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                y * mu + z
            })
            .collect();
        let flip = rng.random::<f64>() < flip_prob;
        features.push(row);
        labels.push(if flip { -y } else { y });
    }
    DroDataset { features, labels }
}

/// Logistic loss `log(1 + exp(-y <x, a>))` and its gradient in `x`.
pub fn logistic_loss_grad(x: &[f64], feature: &[f64], label: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; x.len()];
    let loss = logistic_into(x, feature, label, &mut grad, 1.0);
    (loss, grad)
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Adds `weight * grad l` into `grad` and returns the loss.
fn logistic_into(x: &[f64], feature: &[f64], label: f64, grad: &mut [f64], weight: f64) -> f64 {
    let m = label * x.iter().zip(feature).map(|(a, b)| a * b).sum::<f64>();
    let s = -label * sigmoid(-m) * weight;
    for (g, a) in grad.iter_mut().zip(feature) {
        *g += s * a;
    }
    softplus(-m)
}

fn logistic_loss(x: &[f64], feature: &[f64], label: f64) -> f64 {
    let m = label * x.iter().zip(feature).map(|(a, b)| a * b).sum::<f64>();
    softplus(-m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UncertaintySet {
    /// `(1 / 2n) sum (n q_i - 1)^2 <= rho`
    Chi2 { rho: f64 },
    /// `q_i <= 1 / (alpha n)`
    Cvar { alpha: f64 },
}

impl UncertaintySet {
    pub fn validate(&self) -> Result<()> {
        match *self {
            UncertaintySet::Chi2 { rho } if !(rho >= 0.0 && rho.is_finite()) => {
                Err(Error::domain(format!("chi-square radius must be >= 0, got {rho}")))
            }
            UncertaintySet::Cvar { alpha } if !(alpha > 0.0 && alpha <= 1.0) => {
                Err(Error::domain(format!("CVaR level must lie in (0, 1], got {alpha}")))
            }
            _ => Ok(()),
        }
    }

    pub fn solve(&self, losses: &[f64]) -> Result<(Vec<f64>, f64)> {
        match *self {
            UncertaintySet::Chi2 { rho } => inner_max_chi2(losses, rho),
            UncertaintySet::Cvar { alpha } => inner_max_cvar(losses, alpha),
        }
    }
}

/// `(1 / 2n) sum (n q_i - 1)^2`
pub fn chi2_divergence(q: &[f64]) -> f64 {
    let n = q.len() as f64;
    q.iter().map(|qi| (n * qi - 1.0).powi(2)).sum::<f64>() / (2.0 * n)
}

const LAMBDA_ITERS: usize = 200;
const RESIDUAL_TOL: f64 = 1e-8;

/// Worst-case weights over the chi-square ball around uniform.
///
/// For a multiplier `lambda > 0` the maximizer of the Lagrangian is the simplex
/// projection of `1/n + l / lambda`, which is computed exactly from the sorted
/// losses. The ball radius is then matched by bisection on `log lambda`.
pub fn inner_max_chi2(losses: &[f64], rho: f64) -> Result<(Vec<f64>, f64)> {
    let n = losses.len();
    if n == 0 {
        return Err(Error::domain("inner maximization needs at least one loss"));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::domain("losses must be finite"));
    }
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::domain(format!("chi-square radius must be >= 0, got {rho}")));
    }
    let nf = n as f64;
    let uniform = vec![1.0 / nf; n];
    let lmax = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = losses.iter().sum::<f64>() / nf;
    let spread = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>().sqrt();
    if rho == 0.0 || spread == 0.0 || n == 1 {
        return Ok((uniform, mean));
    }
    // squared-distance radius of the ball
    let r2 = 2.0 * rho / nf;

    // vertex case: uniform mass on the maximizers is feasible
    let ties: Vec<usize> = (0..n).filter(|&i| losses[i] == lmax).collect();
    let k = ties.len() as f64;
    if 1.0 / k - 1.0 / nf <= r2 {
        let mut q = vec![0.0; n];
        ties.iter().for_each(|&i| q[i] = 1.0 / k);
        return Ok((q, lmax));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
    let sorted: Vec<f64> = order.iter().map(|&i| losses[i]).collect();

    let project = |lambda: f64, q: &mut [f64]| {
        // simplex projection of y_i = 1/n + l_i / lambda, using the descending order
        let mut cum = 0.0;
        let mut theta = 0.0;
        for (j, l) in sorted.iter().enumerate() {
            let y = 1.0 / nf + l / lambda;
            cum += y;
            let t = (cum - 1.0) / (j as f64 + 1.0);
            if y - t > 0.0 {
                theta = t;
            } else {
                break;
            }
        }
        for (qi, l) in q.iter_mut().zip(losses) {
            *qi = (1.0 / nf + l / lambda - theta).max(0.0);
        }
    };
    let dist2 = |q: &[f64]| q.iter().map(|qi| (qi - 1.0 / nf).powi(2)).sum::<f64>();

    let mut q = vec![0.0; n];
    // without clipping the distance is spread / lambda, and clipping only adds mass shifts
    // that keep the distance decreasing in lambda
    let mut hi = spread / r2.sqrt();
    project(hi, &mut q);
    while dist2(&q) > r2 {
        hi *= 2.0;
        project(hi, &mut q);
    }
    let mut lo = hi;
    loop {
        lo /= 16.0;
        project(lo, &mut q);
        if dist2(&q) > r2 {
            break;
        }
        hi = lo;
    }
    let mut q_hi = vec![0.0; n];
    project(hi, &mut q_hi);
    for _ in 0..LAMBDA_ITERS {
        let mid = (0.5 * (lo.ln() + hi.ln())).exp();
        project(mid, &mut q);
        let d = dist2(&q);
        if d > r2 {
            lo = mid;
        } else {
            hi = mid;
            q_hi.copy_from_slice(&q);
        }
        if (r2 - dist2(&q_hi)) * nf / 2.0 <= RESIDUAL_TOL * 1e-2 || hi / lo - 1.0 < 1e-15 {
            break;
        }
    }
    let value = q_hi.iter().zip(losses).map(|(a, b)| a * b).sum();
    Ok((q_hi, value))
}

/// Worst-case weights with each weight capped at `1 / (alpha n)`.
pub fn inner_max_cvar(losses: &[f64], alpha: f64) -> Result<(Vec<f64>, f64)> {
    let n = losses.len();
    if n == 0 {
        return Err(Error::domain("inner maximization needs at least one loss"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::domain(format!("CVaR level must lie in (0, 1], got {alpha}")));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::domain("losses must be finite"));
    }
    let cap = 1.0 / (alpha * n as f64);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
    let mut q = vec![0.0; n];
    let mut left = 1.0;
    for &i in &order {
        let w = cap.min(left);
        q[i] = w;
        left -= w;
        if left <= 0.0 {
            break;
        }
    }
    let value = q.iter().zip(losses).map(|(a, b)| a * b).sum();
    Ok((q, value))
}

#[derive(Debug, Clone)]
pub struct DroProblem {
    data: DroDataset,
    set: UncertaintySet,
}

impl DroProblem {
    pub fn new(data: DroDataset, set: UncertaintySet) -> Result<Self> {
        data.validate()?;
        set.validate()?;
        Ok(Self { data, set })
    }

    pub fn dataset(&self) -> &DroDataset {
        &self.data
    }

    pub fn uncertainty(&self) -> UncertaintySet {
        self.set
    }

    fn weighted_gradient(&self, x: &[f64], idx: &[usize], out: &mut [f64]) -> Result<f64> {
        let losses: Vec<f64> = idx
            .iter()
            .map(|&i| logistic_loss(x, &self.data.features[i], self.data.labels[i]))
            .collect();
        let (q, value) = self.set.solve(&losses)?;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (&i, &w) in idx.iter().zip(&q) {
            if w > 0.0 {
                logistic_into(x, &self.data.features[i], self.data.labels[i], out, w);
            }
        }
        Ok(value)
    }

    /// Fraction of points with `sign(<x, a>) = y`.
    pub fn accuracy(&self, x: &[f64]) -> f64 {
        let ok = self
            .data
            .features
            .iter()
            .zip(&self.data.labels)
            .filter(|(a, y)| x.iter().zip(a.iter()).map(|(u, v)| u * v).sum::<f64>() * **y > 0.0)
            .count();
        ok as f64 / self.data.len() as f64
    }
}

impl ProblemOracle for DroProblem {
    fn name(&self) -> &str {
        "dro"
    }

    fn dimension(&self) -> usize {
        self.data.dimension()
    }

    fn cost(&self, eta: BiasLevel) -> u64 {
        eta.get()
    }

    fn max_level(&self) -> Option<BiasLevel> {
        BiasLevel::new(self.data.len() as u64).ok()
    }

    fn draw_gradient(&self, x: &[f64], eta: BiasLevel, rng: &mut DrawRng, out: &mut [f64]) -> Result<()> {
        let big_n = self.data.len();
        let n = eta.get() as usize;
        if n > big_n {
            return Err(Error::domain(format!("subsample size {n} exceeds dataset size {big_n}")));
        }
        // partial Fisher-Yates: the first n positions of a longer run are the same
        let mut perm: Vec<usize> = (0..big_n).collect();
        for i in 0..n {
            let j = rng.random_range(i..big_n);
            perm.swap(i, j);
        }
        self.weighted_gradient(x, &perm[..n], out)?;
        Ok(())
    }

    fn exact_gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let idx: Vec<usize> = (0..self.data.len()).collect();
        let mut out = vec![0.0; self.dimension()];
        self.weighted_gradient(x, &idx, &mut out).ok()?;
        Some(out)
    }

    fn objective(&self, x: &[f64]) -> Objective {
        let losses: Vec<f64> = self
            .data
            .features
            .iter()
            .zip(&self.data.labels)
            .map(|(a, y)| logistic_loss(x, a, *y))
            .collect();
        let value = self.set.solve(&losses).map_or(f64::NAN, |(_, v)| v);
        Objective { value, exact: true }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_trivial_cases() {
        let l = [0.1, 0.9, 0.4];
        let (q, v) = inner_max_chi2(&l, 0.0).unwrap();
        assert_eq!(q, vec![1.0 / 3.0; 3]);
        assert!((v - 1.4 / 3.0).abs() < 1e-15);
        let (_, v) = inner_max_chi2(&[2.5; 4], 0.7).unwrap();
        assert_eq!(v, 2.5);
        assert!(inner_max_chi2(&[1.0, f64::NAN], 0.1).is_err());
    }

    #[test]
    fn chi2_vertex_and_limit() {
        let l = [0.1, 0.9, 0.4, 0.7];
        // (n - 1) / 2 makes the vertex feasible
        let (q, v) = inner_max_chi2(&l, 1.5).unwrap();
        assert_eq!(v, 0.9);
        assert_eq!(q[1], 1.0);
        let (_, v) = inner_max_chi2(&l, 1.45).unwrap();
        assert!(v < 0.9 && v > 0.85);
    }

    #[test]
    fn chi2_feasible_and_active() {
        let l = [0.1, 0.9, 0.4, 0.7, 0.2, 0.5];
        let (q, _) = inner_max_chi2(&l, 0.5).unwrap();
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!(q.iter().all(|&x| x >= 0.0));
        let d = chi2_divergence(&q);
        assert!(d <= 0.5 + 1e-8 && d > 0.5 - 1e-6, "{d}");
    }

    #[test]
    fn cvar_examples() {
        let (q, v) = inner_max_cvar(&[3.0, 1.0, 2.0], 0.5).unwrap();
        assert!((q[0] - 2.0 / 3.0).abs() < 1e-15 && q[1] == 0.0 && (q[2] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v - 8.0 / 3.0).abs() < 1e-12);
        let (q, v) = inner_max_cvar(&[3.0, 1.0, 2.0], 1.0).unwrap();
        assert!(q.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        assert!((v - 2.0).abs() < 1e-12);
        let (_, v) = inner_max_cvar(&[3.0, 1.0, 2.0], 1e-9).unwrap();
        assert_eq!(v, 3.0);
        assert!(inner_max_cvar(&[1.0], 0.0).is_err());
    }

    #[test]
    fn logistic_examples() {
        let (l, g) = logistic_loss_grad(&[0.0, 0.0], &[1.0, -2.0], 1.0);
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![-0.5, 1.0]);
        let (l, g) = logistic_loss_grad(&[1000.0], &[1.0], 1.0);
        assert_eq!(l, 0.0);
        assert_eq!(g[0], 0.0);
        let (l, _) = logistic_loss_grad(&[-1000.0], &[1.0], 1.0);
        assert!((l - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn logistic_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let (_, g) = logistic_loss_grad(&x, &a, y);
            for i in 0..3 {
                let h = 1e-6;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (logistic_loss(&xp, &a, y) - logistic_loss(&xm, &a, y)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn dataset_determinism_and_csv() {
        let a = make_synthetic_dataset(50, 4, 0.1, 3);
        let b = make_synthetic_dataset(50, 4, 0.1, 3);
        assert_eq!(a, b);
        a.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        a.write_csv(&p).unwrap();
        let back = DroDataset::read_csv(&p).unwrap();
        assert_eq!(back, a);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("x1,x2,x3,x4,label\n"));
    }

    #[test]
    fn full_subsample_has_no_bias() {
        let data = make_synthetic_dataset(30, 3, 0.1, 1);
        let p = DroProblem::new(data, UncertaintySet::Chi2 { rho: 0.5 }).unwrap();
        let x = [0.2, -0.1, 0.4];
        let exact = p.exact_gradient(&x).unwrap();
        let est = p
            .sample_gradient(&x, BiasLevel::new(30).unwrap(), &crate::rng::SampleBatch::new(4, 3))
            .unwrap();
        for (a, b) in est.g.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(p.sample_gradient(&x, BiasLevel::new(31).unwrap(), &crate::rng::SampleBatch::new(4, 1)).is_err());
    }

    #[test]
    fn zero_radius_is_plain_average() {
        let data = make_synthetic_dataset(20, 2, 0.0, 5);
        let p = DroProblem::new(data.clone(), UncertaintySet::Chi2 { rho: 0.0 }).unwrap();
        let x = [0.3, 0.3];
        let g = p.exact_gradient(&x).unwrap();
        let mut want = vec![0.0; 2];
        for (a, y) in data.features.iter().zip(&data.labels) {
            let (_, gi) = logistic_loss_grad(&x, a, *y);
            want[0] += gi[0] / 20.0;
            want[1] += gi[1] / 20.0;
        }
        assert!((g[0] - want[0]).abs() < 1e-14 && (g[1] - want[1]).abs() < 1e-14);
    }
}
