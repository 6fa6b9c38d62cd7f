//! C ABI for the fedsim simulator.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `_free` function. Every fallible call returns a
//! [`FedsimStatus`] and stores a message retrievable with
//! [`fedsim_last_error`] on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fedsim::algorithms::{global_perturbation_estimate, local_perturbation};
use fedsim::config::{config_hash, parse_run_config};
use fedsim::metrics::{write_metrics_csv, RoundMetrics};
use fedsim::{run_experiment, Error, ExperimentConfig, ParamVector, RunOutput};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedsimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Contract = 4,
    OutOfRange = 5,
    Io = 6,
    Panic = 7,
}

/// Column selector for [`fedsim_run_metric`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedsimMetric {
    Round = 0,
    TrainLoss = 1,
    TestAccuracy = 2,
    GradNorm = 3,
    Sharpness = 4,
    PerturbationDrift = 5,
    EstimationError = 6,
    LearningRate = 7,
}

/// Parsed experiment config.
pub struct FedsimConfig {
    inner: ExperimentConfig,
    hash: CString,
}

/// Result of a finished (or diverged) run.
pub struct FedsimRun {
    output: RunOutput,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(err: &Error) -> FedsimStatus {
    match err {
        Error::Config { .. } | Error::ConfigSyntax(_) => FedsimStatus::Config,
        Error::Io { .. } | Error::Format { .. } => FedsimStatus::Io,
        Error::Contract(_) | Error::Diverged { .. } => FedsimStatus::Contract,
    }
}

fn guard<F: FnOnce() -> Result<(), (FedsimStatus, String)>>(f: F) -> FedsimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FedsimStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FedsimStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (FedsimStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FedsimStatus, String) {
    (FedsimStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (FedsimStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], (FedsimStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next fedsim call on the same thread.
#[no_mangle]
pub extern "C" fn fedsim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parses a TOML config. On success `*out` receives a new handle.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsim_config_parse(toml: *const c_char, out: *mut *mut FedsimConfig) -> FedsimStatus {
    guard(|| {
        if toml.is_null() {
            return Err(null("toml"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let text = CStr::from_ptr(toml)
            .to_str()
            .map_err(|e| (FedsimStatus::InvalidUtf8, e.to_string()))?;
        let cfg = parse_run_config(text).map_err(lib_err)?;
        let hash = config_hash(text).map_err(lib_err)?;
        let hash = CString::new(hash).map_err(|e| (FedsimStatus::Contract, e.to_string()))?;
        *out = Box::into_raw(Box::new(FedsimConfig {
            inner: cfg.experiment,
            hash,
        }));
        Ok(())
    })
}

/// # Safety
/// `config` must come from [`fedsim_config_parse`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fedsim_config_free(config: *mut FedsimConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Hex SHA-256 of the canonical config text, owned by the handle.
///
/// # Safety
/// `config` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fedsim_config_hash(config: *const FedsimConfig) -> *const c_char {
    match config.as_ref() {
        Some(c) => c.hash.as_ptr(),
        None => ptr::null(),
    }
}

/// Runs the experiment to completion or divergence. A diverged run still
/// returns [`FedsimStatus::Ok`] and a handle; see [`fedsim_run_diverged_round`].
///
/// # Safety
/// `config` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsim_run(config: *const FedsimConfig, out: *mut *mut FedsimRun) -> FedsimStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let output = run_experiment(&cfg.inner).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(FedsimRun { output }));
        Ok(())
    })
}

/// # Safety
/// `run` must come from [`fedsim_run`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fedsim_run_free(run: *mut FedsimRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Round whose update diverged, or -1 when the run completed.
///
/// # Safety
/// `run` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fedsim_run_diverged_round(run: *const FedsimRun) -> i64 {
    match run.as_ref().and_then(|r| r.output.divergence.as_ref()) {
        Some(d) => d.round as i64,
        None => -1,
    }
}

/// Number of rounds completed.
///
/// # Safety
/// `run` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fedsim_run_rounds(run: *const FedsimRun) -> usize {
    run.as_ref().map_or(0, |r| r.output.rounds_completed)
}

/// Number of metric rows recorded.
///
/// # Safety
/// `run` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fedsim_run_metric_rows(run: *const FedsimRun) -> usize {
    run.as_ref().map_or(0, |r| r.output.metrics.len())
}

fn metric_value(m: &RoundMetrics, col: FedsimMetric) -> f64 {
    let v = match col {
        FedsimMetric::Round => Some(m.round as f64),
        FedsimMetric::TrainLoss => m.train_loss,
        FedsimMetric::TestAccuracy => m.test_accuracy,
        FedsimMetric::GradNorm => m.grad_norm,
        FedsimMetric::Sharpness => m.sharpness,
        FedsimMetric::PerturbationDrift => m.pd,
        FedsimMetric::EstimationError => m.est_error,
        FedsimMetric::LearningRate => Some(m.eta_l),
    };
    v.unwrap_or(f64::NAN)
}

/// Reads one metric cell. Values that were not computed come back as NaN.
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsim_run_metric(
    run: *const FedsimRun,
    row: usize,
    column: FedsimMetric,
    out: *mut f64,
) -> FedsimStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let m = r.output.metrics.get(row).ok_or_else(|| {
            (
                FedsimStatus::OutOfRange,
                format!("row {row} out of range ({} rows)", r.output.metrics.len()),
            )
        })?;
        *out = metric_value(m, column);
        Ok(())
    })
}

/// Length of the final parameter vector.
///
/// # Safety
/// `run` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fedsim_run_param_count(run: *const FedsimRun) -> usize {
    run.as_ref().map_or(0, |r| r.output.final_params.len())
}

/// Copies the final parameters into `buf`, which must hold exactly
/// [`fedsim_run_param_count`] values.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fedsim_run_params(run: *const FedsimRun, buf: *mut f64, len: usize) -> FedsimStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let p = &r.output.final_params;
        if len != p.len() {
            return Err((
                FedsimStatus::OutOfRange,
                format!("buffer holds {len} values, run has {}", p.len()),
            ));
        }
        slice_mut(buf, len, "buf")?.copy_from_slice(p);
        Ok(())
    })
}

/// Metrics as CSV text. Free the result with [`fedsim_string_free`].
/// Returns null on failure.
///
/// # Safety
/// `run` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fedsim_run_metrics_csv(run: *const FedsimRun) -> *mut c_char {
    let mut result = ptr::null_mut();
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let mut buf = Vec::new();
        write_metrics_csv(&r.output.metrics, &mut buf).map_err(|e| (FedsimStatus::Io, e.to_string()))?;
        let s = CString::new(buf).map_err(|e| (FedsimStatus::Io, e.to_string()))?;
        result = s.into_raw();
        Ok(())
    });
    result
}

/// # Safety
/// `s` must come from a fedsim function documented to need this call.
#[no_mangle]
pub unsafe extern "C" fn fedsim_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Globally estimated perturbation `rho (w_old - w_t) / ‖w_old - w_t‖`
/// written to `out`; zeros when the two models coincide.
///
/// # Safety
/// All three buffers must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fedsim_global_perturbation(
    w_old: *const f64,
    w_t: *const f64,
    len: usize,
    rho: f64,
    out: *mut f64,
) -> FedsimStatus {
    guard(|| {
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err((FedsimStatus::Contract, format!("rho must be finite and >= 0, got {rho}")));
        }
        let a = ParamVector::new(slice(w_old, len, "w_old")?.to_vec());
        let b = ParamVector::new(slice(w_t, len, "w_t")?.to_vec());
        let d = global_perturbation_estimate(&a, &b, rho).map_err(lib_err)?;
        slice_mut(out, len, "out")?.copy_from_slice(&d);
        Ok(())
    })
}

/// Local SAM perturbation `rho g / ‖g‖`; zeros for a vanishing gradient.
///
/// # Safety
/// Both buffers must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fedsim_local_perturbation(grad: *const f64, len: usize, rho: f64, out: *mut f64) -> FedsimStatus {
    guard(|| {
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err((FedsimStatus::Contract, format!("rho must be finite and >= 0, got {rho}")));
        }
        let g = ParamVector::new(slice(grad, len, "grad")?.to_vec());
        let d = local_perturbation(&g, rho);
        slice_mut(out, len, "out")?.copy_from_slice(&d);
        Ok(())
    })
}
