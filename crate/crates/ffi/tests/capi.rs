use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use biasopt_ffi::*;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn last_error() -> String {
    let p = biasopt_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

const SMALL_CONFIG: &str = r#"{
  "version": 1,
  "problem": {"kind": "synthetic", "q": [[1.0, 0.0], [0.0, 2.0]], "b": [1.0, 0.0],
              "bias": {"family": "power", "a": 1.0, "p": 0.5}, "direction": [1.0, 0.0], "noise_scale": 0.1},
  "x0": [1.0, 1.0],
  "replications": 2,
  "seed": 3,
  "algorithms": [
    {"algorithm": "bsgd", "label": "B-SGD", "iterations": 20, "step": {"kind": "constant", "alpha": 0.1},
     "batch": {"kind": "constant", "size": 4}, "eta_bar": 16},
    {"algorithm": "absg", "label": "AB-SG", "iterations": 20, "step": {"kind": "constant", "alpha": 0.1},
     "batch": {"kind": "constant", "size": 4}, "eta_bar": 16}
  ]
}"#;

#[test]
fn experiment_roundtrip() {
    let json = cstr(SMALL_CONFIG);
    let mut exp = ptr::null_mut();
    let st = unsafe { biasopt_experiment_from_json(json.as_ptr(), ptr::null(), &mut exp) };
    assert_eq!(st, BiasoptStatus::Ok);
    unsafe {
        assert_eq!(biasopt_experiment_algorithm_count(exp), 2);
        assert_eq!(biasopt_experiment_dimension(exp), 2);
        let mut t = ptr::null_mut();
        assert_eq!(biasopt_experiment_run(exp, 1, 0, &mut t), BiasoptStatus::Ok);
        assert_eq!(biasopt_trajectory_len(t), 20);
        let mut rec = BiasoptRecord::default();
        assert_eq!(biasopt_trajectory_record(t, 19, &mut rec), BiasoptStatus::Ok);
        assert_eq!(rec.k, 20);
        assert!(rec.samples_cum >= 80);
        assert!(rec.eta_b_cum >= rec.eta_cum);
        assert_eq!(biasopt_trajectory_record(t, 20, &mut rec), BiasoptStatus::OutOfRange);

        let mut x = [0.0; 2];
        let mut dim = 0;
        assert_eq!(biasopt_trajectory_final_x(t, x.as_mut_ptr(), 1, &mut dim), BiasoptStatus::OutOfRange);
        assert_eq!(dim, 2);
        assert_eq!(biasopt_trajectory_final_x(t, x.as_mut_ptr(), 2, &mut dim), BiasoptStatus::Ok);
        assert!(x.iter().all(|v| v.is_finite()));

        let dir = tempfile::tempdir().unwrap();
        let csv = cstr(dir.path().join("t.csv").to_str().unwrap());
        assert_eq!(biasopt_trajectory_write_csv(t, csv.as_ptr()), BiasoptStatus::Ok);
        let text = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert!(text.starts_with("k,eta,batch,samples_cum,eta_cum,etaB_cum,objective,stationarity_sq,saturated"));
        assert_eq!(text.lines().count(), 21);

        assert_eq!(biasopt_experiment_run(exp, 5, 0, &mut t), BiasoptStatus::OutOfRange);
        biasopt_trajectory_free(t);
        biasopt_experiment_free(exp);
    }
}

#[test]
fn compare_matches_across_thread_counts() {
    let json = cstr(SMALL_CONFIG);
    let mut exp = ptr::null_mut();
    unsafe {
        assert_eq!(biasopt_experiment_from_json(json.as_ptr(), ptr::null(), &mut exp), BiasoptStatus::Ok);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        for (d, threads) in [(&a, 1), (&b, 2)] {
            let p = cstr(d.to_str().unwrap());
            assert_eq!(biasopt_compare(exp, p.as_ptr(), threads), BiasoptStatus::Ok);
        }
        for f in ["run_meta.json", "aggregate_00_b_sgd.csv", "runs/01_ab_sg_r001.csv"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
        }
        biasopt_experiment_free(exp);
    }
}

#[test]
fn load_shipped_config() {
    let path = cstr(configs().join("dro.json").to_str().unwrap());
    let mut exp = ptr::null_mut();
    unsafe {
        assert_eq!(biasopt_experiment_load(path.as_ptr(), &mut exp), BiasoptStatus::Ok);
        assert_eq!(biasopt_experiment_dimension(exp), 10);
        biasopt_experiment_free(exp);
    }
}

#[test]
fn errors_are_reported() {
    let mut exp = ptr::null_mut();
    let missing = cstr("/nonexistent/config.json");
    unsafe {
        assert_eq!(biasopt_experiment_load(missing.as_ptr(), &mut exp), BiasoptStatus::Config);
        assert!(last_error().contains("/nonexistent/config.json"));
        assert!(exp.is_null());
        assert_eq!(biasopt_experiment_load(ptr::null(), &mut exp), BiasoptStatus::NullPointer);
        let bad = cstr("{\"version\": 1");
        assert_eq!(biasopt_experiment_from_json(bad.as_ptr(), ptr::null(), &mut exp), BiasoptStatus::Config);
        assert_eq!(biasopt_experiment_algorithm_count(ptr::null()), 0);
        biasopt_experiment_free(ptr::null_mut());
        biasopt_trajectory_free(ptr::null_mut());
        biasopt_bound_model_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(biasopt_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn bound_model_functions() {
    let json = cstr(r#"{"hb": {"family": "power", "a": 1.0, "p": 0.5}, "hv": {"family": "constant", "value": 2.0}, "sigma": 2.0}"#);
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(biasopt_bound_model_from_json(json.as_ptr(), &mut m), BiasoptStatus::Ok, "{}", last_error());
        let (mut hb, mut hv) = (0.0, 0.0);
        assert_eq!(biasopt_bound_model_eval(m, 4, &mut hb, &mut hv), BiasoptStatus::Ok);
        assert_eq!((hb, hv), (0.5, 2.0));
        assert_eq!(biasopt_bound_model_eval(m, 0, &mut hb, ptr::null_mut()), BiasoptStatus::Domain);
        let (mut eta, mut sat) = (0u64, 9u8);
        assert_eq!(biasopt_bound_model_invert_hb(m, 0.1, 1000, &mut eta, &mut sat), BiasoptStatus::Ok);
        assert_eq!((eta, sat), (100, 0));
        assert_eq!(biasopt_bound_model_invert_hb(m, 0.1, 50, &mut eta, &mut sat), BiasoptStatus::Ok);
        assert_eq!((eta, sat), (50, 1));
        assert_eq!(biasopt_bound_model_invert_hb(m, -1.0, 50, &mut eta, &mut sat), BiasoptStatus::Domain);
        biasopt_bound_model_free(m);

        let report = std::fs::read_to_string(configs().join("mdp_bounds.json")).unwrap();
        let report = cstr(&report);
        assert_eq!(biasopt_bound_model_from_json(report.as_ptr(), &mut m), BiasoptStatus::Ok, "{}", last_error());
        biasopt_bound_model_free(m);
    }
}

#[test]
fn numerics() {
    let x = [1.0, -0.05, 0.3];
    let g = [0.0, 0.0, 1.0];
    let mut out = [0.0; 3];
    unsafe {
        let st = biasopt_prox_step(x.as_ptr(), g.as_ptr(), 3, 0.1, BiasoptRegularizerKind::L1, 1.0, out.as_mut_ptr());
        assert_eq!(st, BiasoptStatus::Ok);
        assert!((out[0] - 0.9).abs() < 1e-15 && out[1] == 0.0 && (out[2] - 0.1).abs() < 1e-15);
        let st = biasopt_prox_step(x.as_ptr(), g.as_ptr(), 3, 0.0, BiasoptRegularizerKind::Zero, 0.0, out.as_mut_ptr());
        assert_eq!(st, BiasoptStatus::Domain);

        let losses = [1.0, 2.0, 3.0];
        let mut q = [0.0; 3];
        let mut v = 0.0;
        assert_eq!(biasopt_chi2_solve(losses.as_ptr(), 3, 0.0, q.as_mut_ptr(), &mut v), BiasoptStatus::Ok);
        assert_eq!(v, 2.0);
        assert_eq!(biasopt_chi2_solve(losses.as_ptr(), 3, 10.0, q.as_mut_ptr(), &mut v), BiasoptStatus::Ok);
        assert_eq!((q, v), ([0.0, 0.0, 1.0], 3.0));
        assert_eq!(biasopt_chi2_solve(losses.as_ptr(), 3, -1.0, q.as_mut_ptr(), &mut v), BiasoptStatus::Domain);
        assert_eq!(biasopt_chi2_solve(ptr::null(), 3, 0.0, q.as_mut_ptr(), &mut v), BiasoptStatus::NullPointer);
    }
}
