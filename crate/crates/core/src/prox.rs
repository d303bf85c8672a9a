//! Proximal steps under Bregman geometry and the gradient-mapping stationarity measure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance-generating function of the prox subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BregmanGeometry {
    /// `omega(x) = ||x||^2 / 2`, giving `D(x, y) = ||x - y||^2 / 2`.
    #[default]
    SquaredEuclidean,
}

impl BregmanGeometry {
    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            BregmanGeometry::SquaredEuclidean => {
                0.5 * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            }
        }
    }
}

/// Convex nonsmooth term of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    Zero,
    L1 { lambda: f64 },
    /// Indicator of the nonnegative orthant.
    NonnegBox,
}

impl Regularizer {
    pub fn validate(&self) -> Result<()> {
        match self {
            Regularizer::L1 { lambda } if !(lambda.is_finite() && *lambda >= 0.0) => {
                Err(Error::domain(format!("l1 weight must be finite and >= 0, got {lambda}")))
            }
            _ => Ok(()),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Regularizer::Zero => 0.0,
            Regularizer::L1 { lambda } => lambda * x.iter().map(|v| v.abs()).sum::<f64>(),
            Regularizer::NonnegBox => {
                if x.iter().all(|&v| v >= 0.0) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Regularizer::Zero | Regularizer::L1 { lambda: 0.0 })
    }
}

fn check(x: &[f64], g: &[f64], alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::domain(format!("stepsize must be positive, got {alpha}")));
    }
    if x.len() != g.len() {
        return Err(Error::domain(format!(
            "dimension mismatch: point {} vs gradient {}",
            x.len(),
            g.len()
        )));
    }
    Ok(())
}

/// Minimizer of `<g, y - x> + phi(y) + D(y, x) / alpha`.
pub fn prox_step(
    x: &[f64],
    g: &[f64],
    alpha: f64,
    phi: &Regularizer,
    omega: &BregmanGeometry,
) -> Result<Vec<f64>> {
    check(x, g, alpha)?;
    let mut out = vec![0.0; x.len()];
    prox_step_into(x, g, alpha, phi, omega, &mut out);
    Ok(out)
}

/// In-place variant used by the algorithms; inputs are assumed validated.
pub(crate) fn prox_step_into(
    x: &[f64],
    g: &[f64],
    alpha: f64,
    phi: &Regularizer,
    omega: &BregmanGeometry,
    out: &mut [f64],
) {
    match omega {
        BregmanGeometry::SquaredEuclidean => {}
    }
    for ((o, xi), gi) in out.iter_mut().zip(x).zip(g) {
        let y = xi - alpha * gi;
        *o = match phi {
            Regularizer::Zero => y,
            Regularizer::L1 { lambda } => soft_threshold(y, alpha * lambda),
            Regularizer::NonnegBox => y.max(0.0),
        };
    }
}

pub fn soft_threshold(y: f64, t: f64) -> f64 {
    if y > t {
        y - t
    } else if y < -t {
        y + t
    } else {
        0.0
    }
}

/// Gradient mapping norm `||x+ - x|| / alpha`, with `x+` the prox step from `x`.
pub fn stationarity_measure(
    x: &[f64],
    grad: &[f64],
    alpha: f64,
    phi: &Regularizer,
    omega: &BregmanGeometry,
) -> Result<f64> {
    let xp = prox_step(x, grad, alpha, phi, omega)?;
    let d: f64 = xp.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(d.sqrt() / alpha)
}

/// The point `argmin <g, y - x> + phi(y) + (2 / alpha) D(y, x)`: a prox step with stepsize `alpha / 2`.
pub fn auxiliary_point(
    x: &[f64],
    grad: &[f64],
    alpha: f64,
    phi: &Regularizer,
    omega: &BregmanGeometry,
) -> Result<Vec<f64>> {
    check(x, grad, alpha)?;
    prox_step(x, grad, alpha / 2.0, phi, omega)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const E: BregmanGeometry = BregmanGeometry::SquaredEuclidean;
    const L1: Regularizer = Regularizer::L1 { lambda: 1.0 };

    #[test]
    fn zero_regularizer_is_gradient_step() {
        let y = prox_step(&[1.0, 2.0], &[1.0, 1.0], 0.5, &Regularizer::Zero, &E).unwrap();
        assert_eq!(y, vec![0.5, 1.5]);
    }

    #[test]
    fn l1_soft_threshold() {
        let y = prox_step(&[0.0, 0.0], &[2.0, -0.5], 1.0, &L1, &E).unwrap();
        assert_eq!(y, vec![-1.0, 0.0]);
        let y = prox_step(&[3.0, -0.2], &[0.0, 0.0], 1.0, &L1, &E).unwrap();
        assert_eq!(y, vec![2.0, 0.0]);
    }

    #[test]
    fn nonneg_box_projects() {
        let y = prox_step(&[1.0, -1.0], &[2.0, 0.0], 1.0, &Regularizer::NonnegBox, &E).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_stepsize() {
        assert!(prox_step(&[1.0], &[1.0], 0.0, &L1, &E).is_err());
        assert!(prox_step(&[1.0], &[1.0], -1.0, &L1, &E).is_err());
        assert!(stationarity_measure(&[1.0], &[1.0], 0.0, &L1, &E).is_err());
        assert!(prox_step(&[1.0, 2.0], &[1.0], 1.0, &L1, &E).is_err());
    }

    #[test]
    fn stationarity_examples() {
        let x = [3.0, 4.0];
        for alpha in [0.1, 1.0, 7.0] {
            let m = stationarity_measure(&x, &x, alpha, &Regularizer::Zero, &E).unwrap();
            assert!((m - 5.0).abs() < 1e-12);
        }
        let m = stationarity_measure(&[0.0, 0.0], &[0.7, -1.0], 1.0, &L1, &E).unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn lasso_fixed_point() {
        // f(x) = (x1 - 1)^2 / 2, lambda = 0.3: optimum x1 = 0.7, x2 = 0.
        let x = [0.7, 0.0];
        let grad = [x[0] - 1.0, 0.0];
        let phi = Regularizer::L1 { lambda: 0.3 };
        for alpha in [0.1, 0.5, 1.0] {
            assert!(stationarity_measure(&x, &grad, alpha, &phi, &E).unwrap() < 1e-12);
        }
    }

    #[test]
    fn auxiliary_point_identities() {
        let x = [1.0, -2.0];
        let g = [0.4, 0.6];
        let a = auxiliary_point(&x, &g, 0.5, &Regularizer::Zero, &E).unwrap();
        assert_eq!(a, vec![1.0 - 0.25 * 0.4, -2.0 - 0.25 * 0.6]);
        assert_eq!(auxiliary_point(&x, &[0.0, 0.0], 0.5, &Regularizer::Zero, &E).unwrap(), x.to_vec());
        assert_eq!(
            auxiliary_point(&x, &g, 0.8, &L1, &E).unwrap(),
            prox_step(&x, &g, 0.4, &L1, &E).unwrap()
        );
    }

    #[test]
    fn euclidean_distance_is_half_square() {
        assert_eq!(E.distance(&[1.0, 1.0], &[0.0, -1.0]), 2.5);
    }

    proptest! {
        #[test]
        fn l1_prox_is_nonexpansive(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            lambda in 0.0f64..3.0,
            alpha in 0.01f64..2.0,
        ) {
            let phi = Regularizer::L1 { lambda };
            let z = vec![0.0; 4];
            let pa = prox_step(&a, &z, alpha, &phi, &E).unwrap();
            let pb = prox_step(&b, &z, alpha, &phi, &E).unwrap();
            let dp: f64 = pa.iter().zip(&pb).map(|(u, v)| (u - v).powi(2)).sum();
            let dy: f64 = a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum();
            prop_assert!(dp.sqrt() <= dy.sqrt() + 1e-12);
        }

        #[test]
        fn l1_prox_satisfies_optimality(
            x in proptest::collection::vec(-5.0f64..5.0, 5),
            g in proptest::collection::vec(-5.0f64..5.0, 5),
            lambda in 0.0f64..3.0,
            alpha in 0.01f64..2.0,
        ) {
            // 0 in g + lambda * sign(y) + (y - x) / alpha
            let phi = Regularizer::L1 { lambda };
            let y = prox_step(&x, &g, alpha, &phi, &E).unwrap();
            for i in 0..5 {
                let r = g[i] + (y[i] - x[i]) / alpha;
                if y[i] != 0.0 {
                    prop_assert!((r + lambda * y[i].signum()).abs() < 1e-10);
                } else {
                    prop_assert!(r.abs() <= lambda + 1e-10);
                }
            }
        }

        #[test]
        fn fixed_point_iff_zero_measure(
            x in proptest::collection::vec(-3.0f64..3.0, 3),
            g in proptest::collection::vec(-3.0f64..3.0, 3),
            alpha in 0.05f64..2.0,
        ) {
            let m = stationarity_measure(&x, &g, alpha, &L1, &E).unwrap();
            let p = prox_step(&x, &g, alpha, &L1, &E).unwrap();
            prop_assert_eq!(m == 0.0, p == x);
        }

        #[test]
        fn zero_prox_matches_explicit_step(
            x in proptest::collection::vec(-3.0f64..3.0, 3),
            g in proptest::collection::vec(-3.0f64..3.0, 3),
            alpha in 0.05f64..2.0,
        ) {
            let p = prox_step(&x, &g, alpha, &Regularizer::Zero, &E).unwrap();
            for i in 0..3 {
                prop_assert_eq!(p[i], x[i] - alpha * g[i]);
            }
        }
    }
}
