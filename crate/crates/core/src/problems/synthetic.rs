//! A quadratic with a fully controlled oracle.
//!
//! One draw is `Qx - b + bias(eta) u + v(eta) eps` with `eps ~ N(0, I)` shared by
//! every level and `v(eta) = s (1 + 1/eta)`. Bias, variance and the
//! consecutive-level difference variance are therefore known in closed form.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{BiasLevel, BoundFn, BoundModel, GradientEstimate, Objective, ProblemOracle};
use crate::rng::{DrawRng, SampleBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BiasProfile {
    /// `a * eta^(-p)`
    Power { a: f64, p: f64 },
    /// `a * r^eta`
    Exponential { a: f64, r: f64 },
}

impl BiasProfile {
    pub fn bound_fn(&self) -> BoundFn {
        match *self {
            BiasProfile::Power { a, p } => BoundFn::Power { a, p },
            BiasProfile::Exponential { a, r } => BoundFn::Exponential { a, r },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Symmetric positive definite matrix, row major.
    pub q: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub bias: BiasProfile,
    /// Bias direction; normalized on construction.
    pub direction: Vec<f64>,
    pub noise_scale: f64,
}

impl SyntheticSpec {
    /// Diagonal quadratic with the bias along the first axis.
    pub fn diagonal(diag: &[f64], bias: BiasProfile, noise_scale: f64) -> Self {
        let d = diag.len();
        let q = (0..d)
            .map(|i| (0..d).map(|j| if i == j { diag[i] } else { 0.0 }).collect())
            .collect();
        let mut direction = vec![0.0; d];
        direction[0] = 1.0;
        Self {
            q,
            b: vec![0.0; d],
            bias,
            direction,
            noise_scale,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    q: DMatrix<f64>,
    b: DVector<f64>,
    bias: BiasProfile,
    u: Vec<f64>,
    s: f64,
    lipschitz: f64,
}

impl SyntheticOracle {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        let d = spec.b.len();
        if d == 0 {
            return Err(Error::domain("synthetic problem needs dimension >= 1"));
        }
        if spec.q.len() != d || spec.q.iter().any(|r| r.len() != d) || spec.direction.len() != d {
            return Err(Error::domain("synthetic problem: inconsistent dimensions"));
        }
        let q = DMatrix::from_fn(d, d, |i, j| spec.q[i][j]);
        if (&q - q.transpose()).amax() > 1e-12 {
            return Err(Error::domain("synthetic problem: Q must be symmetric"));
        }
        let eig = q.clone().symmetric_eigen();
        let min = eig.eigenvalues.min();
        if !(min > 0.0) {
            return Err(Error::domain("synthetic problem: Q must be positive definite"));
        }
        spec.bias.bound_fn().validate()?;
        if !(spec.noise_scale >= 0.0 && spec.noise_scale.is_finite()) {
            return Err(Error::domain("synthetic problem: noise scale must be >= 0"));
        }
        let norm = spec.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::domain("synthetic problem: bias direction must be nonzero"));
        }
        Ok(Self {
            lipschitz: eig.eigenvalues.max(),
            q,
            b: DVector::from_column_slice(&spec.b),
            bias: spec.bias,
            u: spec.direction.iter().map(|v| v / norm).collect(),
            s: spec.noise_scale,
        })
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn bias_at(&self, eta: BiasLevel) -> f64 {
        self.bias.bound_fn().eval(eta)
    }

    pub fn bias_direction(&self) -> &[f64] {
        &self.u
    }

    pub fn noise_scale_at(&self, eta: BiasLevel) -> f64 {
        self.s * (1.0 + 1.0 / eta.as_f64())
    }

    /// The closed-form bounds, with no slack.
    pub fn exact_bounds(&self) -> BoundModel {
        let sd = self.s * (self.dimension() as f64).sqrt();
        BoundModel {
            hb: self.bias.bound_fn(),
            hv: BoundFn::OffsetPower { c: sd, a: sd, p: 1.0 },
            sigma: 2.0 * sd,
            q: Some(BoundFn::PowerGapSquared { a: sd, p: 1.0 }),
            source: Default::default(),
        }
    }

    /// Exact `q(eta1, eta2) = d (v(eta1) - v(eta2))^2`.
    pub fn q_pair(&self, e1: BiasLevel, e2: BiasLevel) -> f64 {
        let dv = self.noise_scale_at(e1) - self.noise_scale_at(e2);
        self.dimension() as f64 * dv * dv
    }

    /// Batch means at several levels from the same draws.
    pub fn sample_gradient_multi(
        &self,
        x: &[f64],
        etas: &[BiasLevel],
        batch: &SampleBatch,
    ) -> Result<Vec<GradientEstimate>> {
        if etas.is_empty() {
            return Err(Error::domain("at least one level is required"));
        }
        etas.iter().map(|&e| self.sample_gradient(x, e, batch)).collect()
    }
}

impl ProblemOracle for SyntheticOracle {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn dimension(&self) -> usize {
        self.b.len()
    }

    fn cost(&self, eta: BiasLevel) -> u64 {
        eta.get()
    }

    fn draw_gradient(&self, x: &[f64], eta: BiasLevel, rng: &mut DrawRng, out: &mut [f64]) -> Result<()> {
        let grad = self.exact_gradient(x).expect("quadratic gradient");
        let bias = self.bias_at(eta);
        let v = self.noise_scale_at(eta);
        for (i, o) in out.iter_mut().enumerate() {
            let eps: f64 = StandardNormal.sample(rng);
            *o = grad[i] + bias * self.u[i] + v * eps;
        }
        Ok(())
    }

    fn exact_gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let x = DVector::from_column_slice(x);
        Some((&self.q * x - &self.b).as_slice().to_vec())
    }

    fn objective(&self, x: &[f64]) -> Objective {
        let x = DVector::from_column_slice(x);
        Objective {
            value: 0.5 * x.dot(&(&self.q * &x)) - self.b.dot(&x),
            exact: true,
        }
    }
}
