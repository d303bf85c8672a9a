use biasopt::harness::report::{format_rows, read_trajectory_csv};
use biasopt::harness::{aggregate, CsvRow};
use biasopt::oracle::{invert_hb, BiasLevel, BoundFn, BoundModel};
use biasopt::problems::dro::{chi2_divergence, UncertaintySet};
use biasopt::prox::{prox_step, BregmanGeometry, Regularizer};
use proptest::prelude::*;

fn model(hb: BoundFn) -> BoundModel {
    BoundModel {
        hb,
        hv: BoundFn::Zero,
        sigma: 0.0,
        q: None,
        source: Default::default(),
    }
}

fn objective(y: &[f64], x: &[f64], g: &[f64], alpha: f64, lambda: f64) -> f64 {
    y.iter()
        .zip(x)
        .zip(g)
        .map(|((yi, xi), gi)| gi * (yi - xi) + lambda * yi.abs() + (yi - xi).powi(2) / (2.0 * alpha))
        .sum()
}

fn row_strategy() -> impl Strategy<Value = (u64, u64, f64, f64, bool)> {
    (1u64..1000, 1u64..100, -1e6f64..1e6, 0f64..1e6, any::<bool>())
}

proptest! {
    #[test]
    fn inversion_is_minimal(a in 0.01f64..100.0, p in 0.1f64..3.0, target in 1e-4f64..10.0, cap in 1u64..5000) {
        let m = model(BoundFn::Power { a, p });
        let inv = invert_hb(&m, target, BiasLevel::new(cap).unwrap()).unwrap();
        let eta = inv.level.get();
        prop_assert!(eta >= 1 && eta <= cap);
        let hb = |e: u64| a / (e as f64).powf(p);
        if inv.saturated {
            prop_assert_eq!(eta, cap);
            prop_assert!(hb(cap) > target);
        } else {
            prop_assert!(hb(eta) <= target * (1.0 + 1e-9));
            if eta > 1 {
                prop_assert!(hb(eta - 1) > target * (1.0 - 1e-9));
            }
        }
    }

    #[test]
    fn exponential_inversion_is_minimal(a in 0.1f64..10.0, r in 0.1f64..0.99, target in 1e-6f64..1.0) {
        let m = model(BoundFn::Exponential { a, r });
        let inv = invert_hb(&m, target, BiasLevel::new(100_000).unwrap()).unwrap();
        let eta = inv.level.get();
        prop_assert!(!inv.saturated);
        prop_assert!(a * r.powf(eta as f64) <= target * (1.0 + 1e-9));
        if eta > 1 {
            prop_assert!(a * r.powf((eta - 1) as f64) > target * (1.0 - 1e-9));
        }
    }

    #[test]
    fn l1_prox_beats_perturbations(
        x in prop::collection::vec(-5f64..5.0, 1..6),
        seed in prop::collection::vec(-5f64..5.0, 6),
        alpha in 0.01f64..2.0,
        lambda in 0f64..3.0,
        eps in prop::collection::vec(-0.1f64..0.1, 6),
    ) {
        let n = x.len();
        let g = &seed[..n];
        let y = prox_step(&x, g, alpha, &Regularizer::L1 { lambda }, &BregmanGeometry::SquaredEuclidean).unwrap();
        let best = objective(&y, &x, g, alpha, lambda);
        let z: Vec<f64> = y.iter().zip(&eps).map(|(a, b)| a + b).collect();
        prop_assert!(best <= objective(&z, &x, g, alpha, lambda) + 1e-12);
    }

    #[test]
    fn nonneg_prox_is_feasible(x in prop::collection::vec(-5f64..5.0, 1..8), alpha in 0.01f64..2.0) {
        let g: Vec<f64> = x.iter().map(|v| v.sin()).collect();
        let y = prox_step(&x, &g, alpha, &Regularizer::NonnegBox, &BregmanGeometry::SquaredEuclidean).unwrap();
        for (i, yi) in y.iter().enumerate() {
            prop_assert!(*yi >= 0.0);
            prop_assert!((yi - (x[i] - alpha * g[i]).max(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn chi2_weights_are_feasible(losses in prop::collection::vec(-3f64..3.0, 1..40), rho in 0f64..2.0) {
        let (q, value) = UncertaintySet::Chi2 { rho }.solve(&losses).unwrap();
        let n = losses.len() as f64;
        prop_assert!(q.iter().all(|&w| w >= -1e-12));
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(chi2_divergence(&q) <= rho * (1.0 + 1e-6) + 1e-9);
        let mean = losses.iter().sum::<f64>() / n;
        let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(value >= mean - 1e-9 && value <= max + 1e-9);
        let dot: f64 = q.iter().zip(&losses).map(|(a, b)| a * b).sum();
        prop_assert!((dot - value).abs() < 1e-9);
    }

    #[test]
    fn envelope_brackets_the_mean(runs in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 5), 1..6)) {
        let rows: Vec<Vec<CsvRow>> = runs
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(k, &v)| CsvRow {
                        k,
                        eta: 1 + k as u64,
                        batch: 1,
                        samples_cum: k as u64 + 1,
                        eta_cum: k as u64 + 1,
                        eta_b_cum: k as u64 + 1,
                        objective: v,
                        stationarity_sq: v * v,
                        saturated: false,
                    })
                    .collect()
            })
            .collect();
        let agg = aggregate("a", &rows, runs.len()).unwrap();
        prop_assert!(agg.complete());
        for env in [&agg.objective, &agg.stationarity_sq] {
            for i in 0..5 {
                prop_assert!(env.min[i] <= env.mean[i] && env.mean[i] <= env.max[i]);
            }
        }
    }

    #[test]
    fn csv_round_trip(raw in prop::collection::vec(row_strategy(), 1..20)) {
        let mut totals = (0u64, 0u64, 0u64);
        let rows: Vec<CsvRow> = raw
            .iter()
            .enumerate()
            .map(|(k, &(eta, batch, obj, st, sat))| {
                totals.0 += batch;
                totals.1 += eta;
                totals.2 += eta * batch;
                CsvRow {
                    k,
                    eta,
                    batch,
                    samples_cum: totals.0,
                    eta_cum: totals.1,
                    eta_b_cum: totals.2,
                    objective: obj,
                    stationarity_sq: st,
                    saturated: sat,
                }
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, format_rows(&rows)).unwrap();
        prop_assert_eq!(read_trajectory_csv(&path).unwrap(), rows);
    }
}

#[test]
fn chi2_zero_radius_is_the_average() {
    let losses = [0.3, -1.0, 2.5, 0.0];
    let (q, value) = UncertaintySet::Chi2 { rho: 0.0 }.solve(&losses).unwrap();
    assert!(q.iter().all(|w| (w - 0.25).abs() < 1e-9));
    assert!((value - 0.45).abs() < 1e-9);
}

#[test]
fn zero_level_is_rejected() {
    assert!(BiasLevel::new(0).is_err());
    assert!(invert_hb(&model(BoundFn::Zero), 0.0, BiasLevel::ONE).is_err());
}
