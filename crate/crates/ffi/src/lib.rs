//! C ABI over `biasopt`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released by the matching `*_free`. Every fallible function
//! returns a [`BiasoptStatus`]; on failure the message is kept per thread and
//! can be read with [`biasopt_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use biasopt::algorithms::Trajectory;
use biasopt::harness::{report, run_compare, write_compare, Experiment, ExperimentConfig};
use biasopt::oracle::{invert_hb, BiasLevel, BoundModel};
use biasopt::problems::dro::inner_max_chi2;
use biasopt::prox::{prox_step, BregmanGeometry, Regularizer};
use biasopt::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasoptStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidString = 2,
    /// Bad configuration, unreadable file or malformed JSON.
    Config = 3,
    /// Argument outside the domain of the operation.
    Domain = 4,
    /// A run failed after it started.
    Runtime = 5,
    OutOfRange = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasoptRegularizerKind {
    Zero = 0,
    L1 = 1,
    NonnegBox = 2,
}

/// One row of a trajectory, matching the columns of the trajectory CSV.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BiasoptRecord {
    pub k: u64,
    pub eta: u64,
    pub batch: u64,
    pub samples_cum: u64,
    pub eta_cum: u64,
    pub eta_b_cum: u64,
    pub objective: f64,
    pub stationarity_sq: f64,
    pub saturated: u8,
}

/// A loaded experiment: problem, bound model and resolved algorithms.
pub struct BiasoptExperiment(Experiment);

pub struct BiasoptTrajectory(Trajectory);

pub struct BiasoptBoundModel(BoundModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(BiasoptStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Domain(_) => BiasoptStatus::Domain,
            ref e if e.is_config() => BiasoptStatus::Config,
            _ => BiasoptStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: BiasoptStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BiasoptStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BiasoptStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            BiasoptStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(BiasoptStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(BiasoptStatus::InvalidString, format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(BiasoptStatus::NullPointer, format!("{name} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(BiasoptStatus::NullPointer, format!("{name} is null")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(BiasoptStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a>(p: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(BiasoptStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn level(eta: u64) -> Result<BiasLevel, Failure> {
    BiasLevel::new(eta).map_err(Failure::from)
}

/// Message of the last failed call on this thread, or null if none failed.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn biasopt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn biasopt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ------------------------------------------------------------ experiments

/// Loads an experiment config file. Relative paths inside it resolve against its directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn biasopt_experiment_load(
    path: *const c_char,
    out: *mut *mut BiasoptExperiment,
) -> BiasoptStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let exp = Experiment::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(BiasoptExperiment(exp)));
        Ok(())
    })
}

/// Builds an experiment from config JSON. `base_dir` (may be null) anchors relative paths.
///
/// # Safety
/// `json` and, if non-null, `base_dir` must be NUL-terminated strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn biasopt_experiment_from_json(
    json: *const c_char,
    base_dir: *const c_char,
    out: *mut *mut BiasoptExperiment,
) -> BiasoptStatus {
    guard(|| {
        let json = str_arg(json, "json")?;
        let base = if base_dir.is_null() {
            PathBuf::new()
        } else {
            PathBuf::from(str_arg(base_dir, "base_dir")?)
        };
        let out = out_arg(out, "out")?;
        let cfg = ExperimentConfig::from_json(json, Path::new("<json>"))?;
        let exp = Experiment::new(cfg, base)?;
        *out = Box::into_raw(Box::new(BiasoptExperiment(exp)));
        Ok(())
    })
}

/// # Safety
/// `exp` must come from this library and not be freed already; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn biasopt_experiment_free(exp: *mut BiasoptExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Number of configured algorithms, or 0 for a null handle.
///
/// # Safety
/// `exp` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn biasopt_experiment_algorithm_count(exp: *const BiasoptExperiment) -> usize {
    exp.as_ref().map_or(0, |e| e.0.runs.len())
}

/// Problem dimension, or 0 for a null handle.
///
/// # Safety
/// `exp` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn biasopt_experiment_dimension(exp: *const BiasoptExperiment) -> usize {
    exp.as_ref().map_or(0, |e| e.0.problem.dimension())
}

/// Runs replication `replication` of algorithm `algorithm` (0-based).
///
/// # Safety
/// `exp` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn biasopt_experiment_run(
    exp: *const BiasoptExperiment,
    algorithm: usize,
    replication: usize,
    out: *mut *mut BiasoptTrajectory,
) -> BiasoptStatus {
    guard(|| {
        let exp = &ref_arg(exp, "exp")?.0;
        let out = out_arg(out, "out")?;
        if algorithm >= exp.runs.len() {
            return Err(fail(
                BiasoptStatus::OutOfRange,
                format!("algorithm {algorithm} of {}", exp.runs.len()),
            ));
        }
        let t = exp.run_cell(algorithm, replication)?;
        *out = Box::into_raw(Box::new(BiasoptTrajectory(t)));
        Ok(())
    })
}

/// Runs every algorithm and replication and writes the compare output to
/// `out_dir`. `threads == 0` uses the default pool. Returns `Runtime` if any
/// cell failed; the files are written regardless.
///
/// # Safety
/// `exp` must be a live handle and `out_dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn biasopt_compare(
    exp: *const BiasoptExperiment,
    out_dir: *const c_char,
    threads: usize,
) -> BiasoptStatus {
    guard(|| {
        let exp = &ref_arg(exp, "exp")?.0;
        let dir = str_arg(out_dir, "out_dir")?;
        let result = run_compare(exp, (threads > 0).then_some(threads))?;
        write_compare(&result, Path::new(dir))?;
        match result.failures() {
            0 => Ok(()),
            n => Err(fail(BiasoptStatus::Runtime, format!("{n} cells failed; see run_meta.json"))),
        }
    })
}

// ------------------------------------------------------------ trajectories

/// # Safety
/// `t` must come from this library and not be freed already; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn biasopt_trajectory_free(t: *mut BiasoptTrajectory) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Number of records, or 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn biasopt_trajectory_len(t: *const BiasoptTrajectory) -> usize {
    t.as_ref().map_or(0, |t| t.0.records.len())
}

/// # Safety
/// `t` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn biasopt_trajectory_record(
    t: *const BiasoptTrajectory,
    index: usize,
    out: *mut BiasoptRecord,
) -> BiasoptStatus {
    guard(|| {
        let t = &ref_arg(t, "trajectory")?.0;
        let out = out_arg(out, "out")?;
        let r = t.records.get(index).ok_or_else(|| {
            fail(BiasoptStatus::OutOfRange, format!("record {index} of {}", t.records.len()))
        })?;
        *out = BiasoptRecord {
            k: r.k as u64,
            eta: r.eta,
            batch: r.batch,
            samples_cum: r.totals.samples,
            eta_cum: r.totals.eta,
            eta_b_cum: r.totals.eta_b,
            objective: r.objective,
            stationarity_sq: r.stationarity_sq,
            saturated: r.saturated as u8,
        };
        Ok(())
    })
}

/// Copies the final iterate into `buf` when `len` is large enough. Always
/// stores the dimension in `dim`.
///
/// # Safety
/// `t` must be a live handle, `buf` valid for `len` writes, `dim` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn biasopt_trajectory_final_x(
    t: *const BiasoptTrajectory,
    buf: *mut f64,
    len: usize,
    dim: *mut usize,
) -> BiasoptStatus {
    guard(|| {
        let t = &ref_arg(t, "trajectory")?.0;
        *out_arg(dim, "dim")? = t.final_x.len();
        if len < t.final_x.len() {
            return Err(fail(
                BiasoptStatus::OutOfRange,
                format!("buffer holds {len} values, need {}", t.final_x.len()),
            ));
        }
        slice_out(buf, t.final_x.len(), "buf")?.copy_from_slice(&t.final_x);
        Ok(())
    })
}

/// Writes the trajectory CSV.
///
/// # Safety
/// `t` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn biasopt_trajectory_write_csv(
    t: *const BiasoptTrajectory,
    path: *const c_char,
) -> BiasoptStatus {
    guard(|| {
        let t = &ref_arg(t, "trajectory")?.0;
        let path = str_arg(path, "path")?;
        report::write_trajectory_csv(Path::new(path), t)?;
        Ok(())
    })
}

// ------------------------------------------------------------ bound models

/// Parses a bound model: either a bare model or a `fit` report.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn biasopt_bound_model_from_json(
    json: *const c_char,
    out: *mut *mut BiasoptBoundModel,
) -> BiasoptStatus {
    guard(|| {
        let json = str_arg(json, "json")?;
        let out = out_arg(out, "out")?;
        let value: serde_json::Value = serde_json::from_str(json)
            .map_err(|e| fail(BiasoptStatus::Config, format!("bound model JSON: {e}")))?;
        let inner = value.get("model").cloned().unwrap_or(value);
        let model: BoundModel = serde_json::from_value(inner)
            .map_err(|e| fail(BiasoptStatus::Config, format!("bound model JSON: {e}")))?;
        model.validate()?;
        *out = Box::into_raw(Box::new(BiasoptBoundModel(model)));
        Ok(())
    })
}

/// # Safety
/// `m` must come from this library and not be freed already; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn biasopt_bound_model_free(m: *mut BiasoptBoundModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Evaluates `hb(eta)` and `hv(eta)`; either output may be null.
///
/// # Safety
/// `m` must be a live handle; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn biasopt_bound_model_eval(
    m: *const BiasoptBoundModel,
    eta: u64,
    hb: *mut f64,
    hv: *mut f64,
) -> BiasoptStatus {
    guard(|| {
        let m = &ref_arg(m, "model")?.0;
        let eta = level(eta)?;
        if let Some(h) = hb.as_mut() {
            *h = m.hb(eta);
        }
        if let Some(h) = hv.as_mut() {
            *h = m.hv(eta);
        }
        Ok(())
    })
}

/// Smallest level in `[1, eta_max]` with `hb(eta) <= target`. `saturated` is
/// set to 1 when no level qualifies and `eta_max` is returned.
///
/// # Safety
/// `m` must be a live handle; `eta` and `saturated` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn biasopt_bound_model_invert_hb(
    m: *const BiasoptBoundModel,
    target: f64,
    eta_max: u64,
    eta: *mut u64,
    saturated: *mut u8,
) -> BiasoptStatus {
    guard(|| {
        let m = &ref_arg(m, "model")?.0;
        let eta = out_arg(eta, "eta")?;
        let saturated = out_arg(saturated, "saturated")?;
        let inv = invert_hb(m, target, level(eta_max)?)?;
        *eta = inv.level.get();
        *saturated = inv.saturated as u8;
        Ok(())
    })
}

// ------------------------------------------------------------ numerics

/// Proximal step `argmin <g, y - x> + phi(y) + |y - x|^2 / (2 alpha)` into `out`.
///
/// # Safety
/// `x`, `g` and `out` must each be valid for `n` values.
#[no_mangle]
pub unsafe extern "C" fn biasopt_prox_step(
    x: *const f64,
    g: *const f64,
    n: usize,
    alpha: f64,
    kind: BiasoptRegularizerKind,
    lambda: f64,
    out: *mut f64,
) -> BiasoptStatus {
    guard(|| {
        let x = slice_arg(x, n, "x")?;
        let g = slice_arg(g, n, "g")?;
        let out = slice_out(out, n, "out")?;
        let phi = match kind {
            BiasoptRegularizerKind::Zero => Regularizer::Zero,
            BiasoptRegularizerKind::L1 => Regularizer::L1 { lambda },
            BiasoptRegularizerKind::NonnegBox => Regularizer::NonnegBox,
        };
        phi.validate()?;
        let y = prox_step(x, g, alpha, &phi, &BregmanGeometry::SquaredEuclidean)?;
        out.copy_from_slice(&y);
        Ok(())
    })
}

/// Worst-case weights over the chi-square ball of radius `rho` around the
/// uniform distribution. Writes `n` weights to `q` and the optimal value to `value`.
///
/// # Safety
/// `losses` and `q` must be valid for `n` values; `value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn biasopt_chi2_solve(
    losses: *const f64,
    n: usize,
    rho: f64,
    q: *mut f64,
    value: *mut f64,
) -> BiasoptStatus {
    guard(|| {
        let losses = slice_arg(losses, n, "losses")?;
        let q = slice_out(q, n, "q")?;
        let value = out_arg(value, "value")?;
        let (w, v) = inner_max_chi2(losses, rho)?;
        q.copy_from_slice(&w);
        *value = v;
        Ok(())
    })
}
