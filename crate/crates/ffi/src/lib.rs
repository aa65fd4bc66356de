//! C ABI over the simulator.
//!
//! Runs are opaque `ArgusRun` handles. Every fallible call returns an
//! `ArgusStatus`; on failure `argus_last_error` describes the cause.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufWriter;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use argus::config::RunConfig;
use argus::engine::Simulation;
use argus::metrics::{write_trace, MetricsRecord};
use argus::ArgusError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgusStatus {
    Ok = 0,
    /// Malformed or invalid configuration.
    ConfigError = 1,
    /// The run produced a non-finite or exploding iterate; it cannot step further.
    Diverged = 2,
    NullPointer = 3,
    InvalidArgument = 4,
    IoError = 5,
    /// The run already completed `T` iterations.
    Finished = 6,
    Panic = 7,
}

/// One row of the metrics trace.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct ArgusMetrics {
    pub t: u64,
    pub psi: f64,
    pub gap_sq: f64,
    pub consensus: f64,
    pub upper_loss: f64,
    pub lower_loss: f64,
    pub task_metric: f64,
    pub active_count: u64,
    pub avg_cuts: f64,
    pub comm_bits_cum: f64,
    pub flops_cum: f64,
    pub virtual_time: f64,
}

impl From<&MetricsRecord> for ArgusMetrics {
    fn from(r: &MetricsRecord) -> Self {
        Self {
            t: r.t as u64,
            psi: r.psi,
            gap_sq: r.gap_sq,
            consensus: r.consensus,
            upper_loss: r.upper_loss,
            lower_loss: r.lower_loss,
            task_metric: r.task_metric,
            active_count: r.active_count as u64,
            avg_cuts: r.avg_cuts,
            comm_bits_cum: r.comm_bits_cum,
            flops_cum: r.flops_cum,
            virtual_time: r.virtual_time,
        }
    }
}

/// Opaque simulation handle.
pub struct ArgusRun {
    sim: Simulation,
    diverged: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &ArgusError) -> ArgusStatus {
    match e {
        ArgusError::Config(_) | ArgusError::Json(_) | ArgusError::Generation(_) => ArgusStatus::ConfigError,
        ArgusError::Divergence { .. } | ArgusError::Numeric { .. } => ArgusStatus::Diverged,
        ArgusError::Io(_) | ArgusError::Csv(_) => ArgusStatus::IoError,
        _ => ArgusStatus::InvalidArgument,
    }
}

fn fail(e: ArgusError) -> ArgusStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

/// Runs `f`, mapping panics to `ArgusStatus::Panic`.
fn guard(f: impl FnOnce() -> ArgusStatus) -> ArgusStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("panic inside argus");
            ArgusStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, ArgusStatus> {
    if p.is_null() {
        set_error(format!("{what} is null"));
        return Err(ArgusStatus::NullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        ArgusStatus::InvalidArgument
    })
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next argus call on the same thread.
#[no_mangle]
pub extern "C" fn argus_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Builds a run from a JSON configuration string.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn argus_run_new(config_json: *const c_char, out: *mut *mut ArgusRun) -> ArgusStatus {
    guard(|| {
        if out.is_null() {
            set_error("out is null");
            return ArgusStatus::NullPointer;
        }
        *out = ptr::null_mut();
        let text = match str_arg(config_json, "config_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let built = (|| {
            let cfg = RunConfig::from_json_str(text)?;
            let problem = cfg.build_problem()?;
            Simulation::new(problem.as_dyn(), cfg.engine_config())
        })();
        match built {
            Ok(sim) => {
                *out = Box::into_raw(Box::new(ArgusRun { sim, diverged: false }));
                ArgusStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Advances one iteration and optionally copies its metrics into `out`.
///
/// # Safety
/// `run` must come from `argus_run_new`; `out` may be null.
#[no_mangle]
pub unsafe extern "C" fn argus_run_step(run: *mut ArgusRun, out: *mut ArgusMetrics) -> ArgusStatus {
    guard(|| {
        let Some(run) = run.as_mut() else {
            set_error("run is null");
            return ArgusStatus::NullPointer;
        };
        if run.diverged {
            set_error("run has diverged");
            return ArgusStatus::Diverged;
        }
        if run.sim.finished() {
            return ArgusStatus::Finished;
        }
        match run.sim.step() {
            Ok(rec) => {
                if let Some(o) = out.as_mut() {
                    *o = ArgusMetrics::from(rec);
                }
                ArgusStatus::Ok
            }
            Err(e) => {
                run.diverged = matches!(status_of(&e), ArgusStatus::Diverged);
                fail(e)
            }
        }
    })
}

/// Steps until the run finishes or fails.
///
/// # Safety
/// `run` must come from `argus_run_new`.
#[no_mangle]
pub unsafe extern "C" fn argus_run_to_end(run: *mut ArgusRun) -> ArgusStatus {
    loop {
        match argus_run_step(run, ptr::null_mut()) {
            ArgusStatus::Ok => continue,
            ArgusStatus::Finished => return ArgusStatus::Ok,
            other => return other,
        }
    }
}

/// Number of completed iterations; 0 for a null handle.
///
/// # Safety
/// `run` must be null or come from `argus_run_new`.
#[no_mangle]
pub unsafe extern "C" fn argus_run_iteration(run: *const ArgusRun) -> u64 {
    run.as_ref().map_or(0, |r| r.sim.iteration() as u64)
}

/// Copies the metrics of iteration `t` (1-based) into `out`.
///
/// # Safety
/// `run` must come from `argus_run_new` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn argus_run_metrics(run: *const ArgusRun, t: u64, out: *mut ArgusMetrics) -> ArgusStatus {
    guard(|| {
        let (Some(run), Some(out)) = (run.as_ref(), out.as_mut()) else {
            set_error("run or out is null");
            return ArgusStatus::NullPointer;
        };
        let trace = run.sim.trace();
        match (t as usize).checked_sub(1).and_then(|k| trace.get(k)) {
            Some(rec) => {
                *out = ArgusMetrics::from(rec);
                ArgusStatus::Ok
            }
            None => {
                set_error(format!("no iteration {t}; {} completed", trace.len()));
                ArgusStatus::InvalidArgument
            }
        }
    })
}

/// Writes the trace so far as `metrics.csv`-format text to `path`.
///
/// # Safety
/// `run` must come from `argus_run_new`; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn argus_run_write_csv(run: *const ArgusRun, path: *const c_char) -> ArgusStatus {
    guard(|| {
        let Some(run) = run.as_ref() else {
            set_error("run is null");
            return ArgusStatus::NullPointer;
        };
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let result = File::create(path).map_err(ArgusError::from).and_then(|f| write_trace(BufWriter::new(f), run.sim.trace()));
        match result {
            Ok(()) => ArgusStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Releases a run. Null is ignored.
///
/// # Safety
/// `run` must be null or come from `argus_run_new`, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn argus_run_free(run: *mut ArgusRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Soft-thresholding of `len` values: `out_k = sign(v_k) max(|v_k| - s, 0)`.
/// `out` may alias `v`.
///
/// # Safety
/// `v` and `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn argus_prox_l1(v: *const f64, len: usize, s: f64, out: *mut f64) -> ArgusStatus {
    guard(|| {
        if len > 0 && (v.is_null() || out.is_null()) {
            set_error("v or out is null");
            return ArgusStatus::NullPointer;
        }
        if len == 0 {
            return ArgusStatus::Ok;
        }
        let input = std::slice::from_raw_parts(v, len).to_vec();
        match argus::problem::prox_l1(&input, s) {
            Ok(r) => {
                std::slice::from_raw_parts_mut(out, len).copy_from_slice(&r);
                ArgusStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// `rho = ||W - (1/n) 1 1^T||_2` for a symmetric row-major `n x n` matrix.
///
/// # Safety
/// `w` must point to `n * n` doubles and `out` to one.
#[no_mangle]
pub unsafe extern "C" fn argus_spectral_gap(w: *const f64, n: usize, out: *mut f64) -> ArgusStatus {
    guard(|| {
        if w.is_null() || out.is_null() {
            set_error("w or out is null");
            return ArgusStatus::NullPointer;
        }
        if n == 0 {
            set_error("n must be positive");
            return ArgusStatus::InvalidArgument;
        }
        let Some(len) = n.checked_mul(n) else {
            set_error("n * n overflows");
            return ArgusStatus::InvalidArgument;
        };
        match argus::network::spectral_gap(std::slice::from_raw_parts(w, len), n) {
            Ok(rho) => {
                *out = rho;
                ArgusStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn argus_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
