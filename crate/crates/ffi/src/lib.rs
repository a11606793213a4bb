//! C interface to `locksim`.
//!
//! Every fallible call returns an [`LsStatus`]. On failure the message is kept
//! per thread and can be read with [`ls_last_error`]. Objects handed out as
//! pointers are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use locksim::analysis::fit_exponential;
use locksim::bloch::{rotate_constant, BlochState, DriveField};
use locksim::ensemble::{run_ensemble, Trace};
use locksim::runner::{self, RunConfig};
use locksim::shf::{self, ClusterDoc, PathwayReport};
use locksim::Error;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LsStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad argument or configuration; nothing was computed.
    InvalidArgument = 2,
    /// The computation ran but failed (fit, calibration, resource limit).
    Numerical = 3,
    Io = 4,
    InvalidUtf8 = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> LsStatus {
    match runner::exit_code(e) {
        runner::EXIT_VALIDATION => LsStatus::InvalidArgument,
        runner::EXIT_IO => LsStatus::Io,
        _ => LsStatus::Numerical,
    }
}

fn guard(f: impl FnOnce() -> Result<(), LsStatus>) -> LsStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LsStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("panic inside locksim");
            LsStatus::Panic
        }
    }
}

fn fail(e: Error) -> LsStatus {
    set_error(e.to_string());
    status_of(&e)
}

fn null(what: &str) -> LsStatus {
    set_error(format!("{what} is null"));
    LsStatus::NullPointer
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, LsStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        LsStatus::InvalidUtf8
    })
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next `ls_` call on the same thread.
#[no_mangle]
pub extern "C" fn ls_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ls_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Bloch vector (u, v, w).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsBloch {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

/// Exact lossless evolution for `dt` seconds under drive `chi` (rad/s) at
/// `phase` (rad) and detuning `delta` (rad/s).
///
/// # Safety
/// `out` must be NULL or point to writable memory for one `LsBloch`.
#[no_mangle]
pub unsafe extern "C" fn ls_rotate(
    state: LsBloch,
    chi: f64,
    phase: f64,
    delta: f64,
    dt: f64,
    out: *mut LsBloch,
) -> LsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let field = DriveField::new(chi, phase).map_err(fail)?;
        let s = rotate_constant(BlochState::new(state.u, state.v, state.w), field, delta, dt).map_err(fail)?;
        *out = LsBloch { u: s.u, v: s.v, w: s.w };
        Ok(())
    })
}

/// Opaque ensemble trace.
pub struct LsTrace(Trace);

/// Runs the sequence described by a JSON run configuration (the same
/// document the command line accepts) and returns its averaged trace.
/// Without a `seed` field the seed is 0.
///
/// # Safety
/// `config_json` must be NULL or a NUL-terminated string; `out` must be NULL
/// or point to writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn ls_simulate_json(config_json: *const c_char, out: *mut *mut LsTrace) -> LsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let text = read_str(config_json, "config_json")?;
        let cfg: RunConfig = runner::parse_document(text).map_err(fail)?;
        let r = cfg.resolve(cfg.seed.unwrap_or(0)).map_err(fail)?;
        let seq = r.protocol.sequence().map_err(fail)?;
        let trace = run_ensemble(&r.spec, &seq, &r.ion, &r.bath).map_err(fail)?;
        *out = Box::into_raw(Box::new(LsTrace(trace)));
        Ok(())
    })
}

/// Number of samples in `trace`, or 0 if it is NULL.
///
/// # Safety
/// `trace` must be NULL or a live pointer from [`ls_simulate_json`].
#[no_mangle]
pub unsafe extern "C" fn ls_trace_len(trace: *const LsTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.0.len())
}

/// Copies the trace into caller buffers of `len` elements each. `len` must
/// equal [`ls_trace_len`]. Any of the three buffers may be NULL to skip it.
///
/// # Safety
/// Each non-NULL buffer must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ls_trace_copy(
    trace: *const LsTrace,
    times: *mut f64,
    i: *mut f64,
    q: *mut f64,
    len: usize,
) -> LsStatus {
    guard(|| {
        let t = match trace.as_ref() {
            Some(t) => &t.0,
            None => return Err(null("trace")),
        };
        if len != t.len() {
            set_error(format!("buffer length {len} does not match trace length {}", t.len()));
            return Err(LsStatus::InvalidArgument);
        }
        for (src, dst) in [(&t.times, times), (&t.i, i), (&t.q, q)] {
            if !dst.is_null() {
                ptr::copy_nonoverlapping(src.as_ptr(), dst, len);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `trace` must be NULL or a pointer from [`ls_simulate_json`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ls_trace_free(trace: *mut LsTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Fitted A(t) = a0 exp(-t / t_dec).
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LsDecayFit {
    pub a0: f64,
    pub t_dec: f64,
    pub stderr_a0: f64,
    pub stderr_t_dec: f64,
    pub residual_rms: f64,
}

/// Least-squares exponential fit of `n` (t, y) points.
///
/// # Safety
/// `t` and `y` must hold `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ls_fit_exponential(t: *const f64, y: *const f64, n: usize, out: *mut LsDecayFit) -> LsStatus {
    guard(|| {
        if t.is_null() || y.is_null() || out.is_null() {
            return Err(null("t, y or out"));
        }
        let ts = std::slice::from_raw_parts(t, n);
        let ys = std::slice::from_raw_parts(y, n);
        let pts: Vec<(f64, f64)> = ts.iter().copied().zip(ys.iter().copied()).collect();
        let f = fit_exponential(&pts).map_err(fail)?;
        *out = LsDecayFit {
            a0: f.a0,
            t_dec: f.t_dec,
            stderr_a0: f.stderr_a0,
            stderr_t_dec: f.stderr_t_dec,
            residual_rms: f.residual_rms,
        };
        Ok(())
    })
}

/// Opaque superhyperfine pathway report.
pub struct LsShfReport(PathwayReport);

/// Analyses a cluster given as JSON (same layout as the command line's
/// cluster file), or the built-in five-nucleus preset when `cluster_json`
/// is NULL.
///
/// # Safety
/// `cluster_json` must be NULL or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ls_shf_analyze(
    cluster_json: *const c_char,
    threshold: f64,
    out: *mut *mut LsShfReport,
) -> LsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cluster = if cluster_json.is_null() {
            shf::laf3_like_preset()
        } else {
            let text = read_str(cluster_json, "cluster_json")?;
            let doc: ClusterDoc = runner::parse_document(text).map_err(fail)?;
            doc.to_cluster().map_err(fail)?
        };
        let report = shf::analyze(&cluster, threshold).map_err(fail)?;
        *out = Box::into_raw(Box::new(LsShfReport(report)));
        Ok(())
    })
}

/// # Safety
/// `report` must be NULL or a live pointer from [`ls_shf_analyze`].
#[no_mangle]
pub unsafe extern "C" fn ls_shf_pathway_count(report: *const LsShfReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.pathway_count)
}

/// # Safety
/// `report` must be NULL or a live pointer from [`ls_shf_analyze`].
#[no_mangle]
pub unsafe extern "C" fn ls_shf_side_hole_weight(report: *const LsShfReport) -> f64 {
    report.as_ref().map_or(f64::NAN, |r| r.0.side_hole_weight)
}

/// Side dimension of the square strength table (2^n for n nuclei).
///
/// # Safety
/// `report` must be NULL or a live pointer from [`ls_shf_analyze`].
#[no_mangle]
pub unsafe extern "C" fn ls_shf_dim(report: *const LsShfReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.strengths.len())
}

/// Copies the strength table row-major into `buf` of `dim * dim` doubles.
///
/// # Safety
/// `buf` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ls_shf_strengths(report: *const LsShfReport, buf: *mut f64, len: usize) -> LsStatus {
    guard(|| {
        let r = match report.as_ref() {
            Some(r) => &r.0,
            None => return Err(null("report")),
        };
        if buf.is_null() {
            return Err(null("buf"));
        }
        let d = r.strengths.len();
        if len != d * d {
            set_error(format!("buffer length {len} != {}", d * d));
            return Err(LsStatus::InvalidArgument);
        }
        for (k, row) in r.strengths.iter().enumerate() {
            ptr::copy_nonoverlapping(row.as_ptr(), buf.add(k * d), d);
        }
        Ok(())
    })
}

/// # Safety
/// `report` must be NULL or a pointer from [`ls_shf_analyze`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ls_shf_free(report: *mut LsShfReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
