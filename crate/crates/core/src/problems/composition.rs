//! Two-level composition `F(x) = f(g(x))` with
//! `g(x) = (x1 + 3 x2, 2 x1^2 - x2, x1^2 - x1 x2^2)` and
//! `f(u) = u1^2 - u2^2 + u1 u2 u3 + u3^2`.
//!
//! A draw estimates the inner value by averaging `eta` noisy copies of `g(x)`,
//! pushes the average through `grad f`, and multiplies by one noisy Jacobian.
//! The plug-in of an averaged inner value is what makes the estimate biased.
//!
//! Inner value noise for copy `i` is `sigma_g * (sqrt(c) z0_i + sqrt(1 - c) z_i)`
//! per component, where `c` is the cross-component correlation. Because the
//! only nonlinear terms of `grad f` are products of distinct coordinates, the
//! bias is exactly `c sigma_g^2 / eta * J(x)^T (1, 1, 1)`; independent components
//! (`c = 0`) give an unbiased estimator.

use nalgebra::Matrix3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{BiasLevel, BoundFn, BoundModel, Objective, ProblemOracle};
use crate::rng::DrawRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositionSpec {
    pub sigma_g: f64,
    pub sigma_j: f64,
    pub sigma_f: f64,
    pub value_noise_correlation: f64,
}

impl Default for CompositionSpec {
    fn default() -> Self {
        Self {
            sigma_g: 1.0,
            sigma_j: 1.0,
            sigma_f: 1.0,
            value_noise_correlation: 1.0,
        }
    }
}

pub fn inner(x: &[f64]) -> [f64; 3] {
    let (a, b) = (x[0], x[1]);
    [a + 3.0 * b, 2.0 * a * a - b, a * a - a * b * b]
}

/// Rows are the gradients of the three inner components.
pub fn jacobian(x: &[f64]) -> [[f64; 2]; 3] {
    let (a, b) = (x[0], x[1]);
    [[1.0, 3.0], [4.0 * a, -1.0], [2.0 * a - b * b, -2.0 * a * b]]
}

pub fn outer(u: &[f64; 3]) -> f64 {
    u[0] * u[0] - u[1] * u[1] + u[0] * u[1] * u[2] + u[2] * u[2]
}

pub fn outer_gradient(u: &[f64; 3]) -> [f64; 3] {
    [
        2.0 * u[0] + u[1] * u[2],
        -2.0 * u[1] + u[0] * u[2],
        u[0] * u[1] + 2.0 * u[2],
    ]
}

pub fn outer_hessian(u: &[f64; 3]) -> Matrix3<f64> {
    Matrix3::new(2.0, u[2], u[1], u[2], -2.0, u[0], u[1], u[0], 2.0)
}

fn jt_times(j: &[[f64; 2]; 3], v: &[f64; 3]) -> [f64; 2] {
    [
        j[0][0] * v[0] + j[1][0] * v[1] + j[2][0] * v[2],
        j[0][1] * v[0] + j[1][1] * v[1] + j[2][1] * v[2],
    ]
}

fn spectral_norm_3x2(j: &[[f64; 2]; 3]) -> f64 {
    // largest eigenvalue of the 2x2 Gram matrix J^T J
    let mut g = [[0.0; 2]; 2];
    for row in j {
        for p in 0..2 {
            for q in 0..2 {
                g[p][q] += row[p] * row[q];
            }
        }
    }
    let tr = g[0][0] + g[1][1];
    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    (tr / 2.0 + disc).sqrt()
}

/// Local constants of the inner-averaging bias bound `C_g L_f sigma_g eta^(-1/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalLemma1Constants {
    /// Bound on the inner Jacobian norm.
    pub c_g: f64,
    /// Lipschitz constant of `grad f` over the inner image.
    pub l_f: f64,
    /// Standard deviation of one inner value sample.
    pub sigma_g: f64,
}

pub fn lemma1_bound(c: &LocalLemma1Constants, eta: BiasLevel) -> f64 {
    c.c_g * c.l_f * c.sigma_g / eta.as_f64().sqrt()
}

#[derive(Debug, Clone)]
pub struct CompositionProblem {
    spec: CompositionSpec,
}

impl CompositionProblem {
    pub fn new(spec: CompositionSpec) -> Result<Self> {
        for (name, v) in [
            ("sigma_g", spec.sigma_g),
            ("sigma_j", spec.sigma_j),
            ("sigma_f", spec.sigma_f),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::domain(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        let c = spec.value_noise_correlation;
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::domain(format!("value noise correlation must lie in [0, 1], got {c}")));
        }
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &CompositionSpec {
        &self.spec
    }

    /// Closed-form `E[estimate] - grad F(x)` at level `eta`.
    pub fn exact_bias(&self, x: &[f64], eta: BiasLevel) -> Vec<f64> {
        let s = self.spec.value_noise_correlation * self.spec.sigma_g * self.spec.sigma_g / eta.as_f64();
        jt_times(&jacobian(x), &[s, s, s]).to_vec()
    }

    /// Estimates the bound constants over the box `[lo, hi]^2` from `points`
    /// sampled locations, inflated by `inflation`.
    pub fn local_lemma1_constants(&self, lo: f64, hi: f64, points: usize, seed: u64, inflation: f64) -> LocalLemma1Constants {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_g: f64 = 0.0;
        let mut l_f: f64 = 0.0;
        for _ in 0..points.max(1) {
            let x = [rng.random_range(lo..=hi), rng.random_range(lo..=hi)];
            c_g = c_g.max(spectral_norm_3x2(&jacobian(&x)));
            let h = outer_hessian(&inner(&x));
            let ev = h.symmetric_eigenvalues();
            l_f = l_f.max(ev.amax());
        }
        LocalLemma1Constants {
            c_g: c_g * inflation,
            l_f: l_f * inflation,
            sigma_g: self.spec.sigma_g * 3f64.sqrt() * inflation,
        }
    }

    /// Bound model with the inner-averaging bias bound and a constant variance cap.
    pub fn analytic_bounds(&self, c: &LocalLemma1Constants, sigma: f64) -> Result<BoundModel> {
        BoundModel::new(
            BoundFn::Power {
                a: c.c_g * c.l_f * c.sigma_g,
                p: 0.5,
            },
            BoundFn::Constant { value: sigma },
            sigma,
            None,
        )
    }
}

impl ProblemOracle for CompositionProblem {
    fn name(&self) -> &str {
        "composition"
    }

    fn dimension(&self) -> usize {
        2
    }

    fn cost(&self, eta: BiasLevel) -> u64 {
        eta.get() + 2
    }

    fn draw_gradient(&self, x: &[f64], eta: BiasLevel, rng: &mut DrawRng, out: &mut [f64]) -> Result<()> {
        let s = &self.spec;
        let mut j = jacobian(x);
        if s.sigma_j > 0.0 {
            for row in j.iter_mut() {
                for v in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += s.sigma_j * z;
                }
            }
        }
        let mut phi = [0.0; 3];
        if s.sigma_f > 0.0 {
            for p in phi.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *p = s.sigma_f * z;
            }
        }
        let mut u = inner(x);
        if s.sigma_g > 0.0 {
            let c = s.value_noise_correlation;
            let n = eta.get();
            let mut acc = [0.0; 3];
            if c == 1.0 {
                let mut sum = 0.0;
                for _ in 0..n {
                    let z: f64 = StandardNormal.sample(rng);
                    sum += z;
                }
                acc = [sum; 3];
            } else if c == 0.0 {
                for _ in 0..n {
                    for a in acc.iter_mut() {
                        let z: f64 = StandardNormal.sample(rng);
                        *a += z;
                    }
                }
            } else {
                let (wc, wi) = (c.sqrt(), (1.0 - c).sqrt());
                for _ in 0..n {
                    let z0: f64 = StandardNormal.sample(rng);
                    for a in acc.iter_mut() {
                        let z: f64 = StandardNormal.sample(rng);
                        *a += wc * z0 + wi * z;
                    }
                }
            }
            let scale = s.sigma_g / n as f64;
            for (ui, a) in u.iter_mut().zip(acc) {
                *ui += scale * a;
            }
        }
        let mut gf = outer_gradient(&u);
        for (g, p) in gf.iter_mut().zip(phi) {
            *g += p;
        }
        out.copy_from_slice(&jt_times(&j, &gf));
        Ok(())
    }

    fn exact_gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(jt_times(&jacobian(x), &outer_gradient(&inner(x))).to_vec())
    }

    fn objective(&self, x: &[f64]) -> Objective {
        Objective {
            value: outer(&inner(x)),
            exact: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SampleBatch;

    fn lvl(e: u64) -> BiasLevel {
        BiasLevel::new(e).unwrap()
    }

    #[test]
    fn gradient_at_known_points() {
        let p = CompositionProblem::new(CompositionSpec::default()).unwrap();
        assert_eq!(p.exact_gradient(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(p.exact_gradient(&[1.0, 1.0]).unwrap(), vec![4.0, 18.0]);
        assert_eq!(inner(&[1.0, 1.0]), [4.0, 1.0, 0.0]);
        assert_eq!(outer_gradient(&[4.0, 1.0, 0.0]), [8.0, -2.0, 4.0]);
    }

    #[test]
    fn noiseless_draw_is_exact() {
        let spec = CompositionSpec {
            sigma_g: 0.0,
            sigma_j: 0.0,
            sigma_f: 0.0,
            value_noise_correlation: 1.0,
        };
        let p = CompositionProblem::new(spec).unwrap();
        let x = [0.3, -1.2];
        for e in [1, 7, 50] {
            let est = p.sample_gradient(&x, lvl(e), &SampleBatch::new(3, 4)).unwrap();
            assert_eq!(est.g, p.exact_gradient(&x).unwrap());
            assert_eq!(est.cost_units, 4 * (e + 2));
        }
    }

    #[test]
    fn bound_formula() {
        let c = LocalLemma1Constants { c_g: 1.0, l_f: 1.0, sigma_g: 1.0 };
        assert_eq!(lemma1_bound(&c, lvl(4)), 0.5);
        assert_eq!(lemma1_bound(&c, lvl(1)), 1.0);
        let r = lemma1_bound(&c, lvl(3)) / lemma1_bound(&c, lvl(6));
        assert!((r - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn spectral_norm_matches_eigen() {
        let j = jacobian(&[0.7, -1.3]);
        let m = nalgebra::Matrix3x2::new(j[0][0], j[0][1], j[1][0], j[1][1], j[2][0], j[2][1]);
        let want = m.singular_values().max();
        assert!((spectral_norm_3x2(&j) - want).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_spec() {
        let mut s = CompositionSpec::default();
        s.sigma_g = -1.0;
        assert!(CompositionProblem::new(s).is_err());
        let mut s = CompositionSpec::default();
        s.value_noise_correlation = 1.5;
        assert!(CompositionProblem::new(s).is_err());
    }
}
