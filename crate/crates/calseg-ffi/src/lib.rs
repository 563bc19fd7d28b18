//! C interface over the metric and bound calculators: flat-array inputs,
//! status-code returns, an opaque handle for calibration reports, and a
//! thread-local last-error message. The training stack stays Rust-only;
//! this surface covers the pieces downstream tooling evaluates offline.
//!
//! Conventions: volumes and masks are x-fastest flat arrays with extents
//! `dims = [nx, ny, nz]`; every fallible call returns [`CalsegStatus`]
//! and writes results through out-pointers only on `CALSEG_STATUS_OK`;
//! the message behind [`calseg_last_error`] describes the most recent
//! failure on the calling thread and is stable until its next failure.

use std::cell::RefCell;
use std::ffi::{c_char, CString};

use calseg::bounds::{ece_bound, pac_bayes_bound, BoundInputs};
use calseg::error::Error;
use calseg::formats::Mask;
use calseg::metrics::{calibration_report, dsc, hd95, temperature_scale, CalibrationReport};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalsegStatus {
    /// The call succeeded and all out-pointers are populated.
    Ok = 0,
    /// A required pointer was null.
    NullPointer = 1,
    /// Inputs violated a documented precondition.
    InvalidArgument = 2,
    /// The computation failed numerically.
    NumericError = 3,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: CalsegStatus, message: &str) -> CalsegStatus {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
    status
}

fn fail_with(err: Error) -> CalsegStatus {
    let status = match err {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Shape { .. } => CalsegStatus::InvalidArgument,
        Error::NonFinite { .. } => CalsegStatus::NumericError,
        _ => CalsegStatus::InvalidArgument,
    };
    fail(status, &err.to_string())
}

/// Message describing the calling thread's most recent failure, empty
/// before any failure. The pointer stays valid until the next failing
/// call on the same thread.
#[no_mangle]
pub extern "C" fn calseg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Crate version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn calseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

unsafe fn mask_from_raw(data: *const u8, dims: *const usize, spacing: [f64; 3]) -> Result<Mask, CalsegStatus> {
    if data.is_null() || dims.is_null() {
        return Err(fail(CalsegStatus::NullPointer, "mask data and dims must be non-null"));
    }
    let dims = unsafe { std::slice::from_raw_parts(dims, 3) };
    let dims = [dims[0], dims[1], dims[2]];
    let n = dims.iter().product();
    let data = unsafe { std::slice::from_raw_parts(data, n) };
    Mask::new(dims, spacing, data.to_vec()).map_err(|e| fail_with(e))
}

/// Dice overlap of two binary masks with extents `dims = [nx, ny, nz]`;
/// both buffers hold `nx * ny * nz` voxels of 0 or 1, x-fastest. Two
/// empty masks score 1.0.
///
/// # Safety
/// `pred` and `truth` must point to `nx * ny * nz` readable bytes and
/// `dims` to three readable `size_t`s; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn calseg_dsc(
    pred: *const u8,
    truth: *const u8,
    dims: *const usize,
    out: *mut f64,
) -> CalsegStatus {
    if out.is_null() {
        return fail(CalsegStatus::NullPointer, "out must be non-null");
    }
    let unit = [1.0, 1.0, 1.0];
    let (p, t) = match (unsafe { mask_from_raw(pred, dims, unit) }, unsafe { mask_from_raw(truth, dims, unit) }) {
        (Ok(p), Ok(t)) => (p, t),
        (Err(s), _) | (_, Err(s)) => return s,
    };
    match dsc(&p, &t) {
        Ok(v) => {
            unsafe { *out = v };
            CalsegStatus::Ok
        }
        Err(e) => fail_with(e),
    }
}

/// 95th-percentile symmetric surface distance in millimeters between two
/// binary masks, honoring anisotropic voxel `spacing` (mm per axis). When
/// either mask is empty the distance is undefined: `*defined` is set to
/// false and `*out` to NaN, with an `Ok` status.
///
/// # Safety
/// Pointer contracts as in [`calseg_dsc`], plus `spacing` must point to
/// three readable doubles and `defined` must be writable.
#[no_mangle]
pub unsafe extern "C" fn calseg_hd95(
    pred: *const u8,
    truth: *const u8,
    dims: *const usize,
    spacing: *const f64,
    out: *mut f64,
    defined: *mut bool,
) -> CalsegStatus {
    if out.is_null() || defined.is_null() || spacing.is_null() {
        return fail(CalsegStatus::NullPointer, "out, defined, and spacing must be non-null");
    }
    let sp = unsafe { std::slice::from_raw_parts(spacing, 3) };
    let sp = [sp[0], sp[1], sp[2]];
    let (p, t) = match (unsafe { mask_from_raw(pred, dims, sp) }, unsafe { mask_from_raw(truth, dims, sp) }) {
        (Ok(p), Ok(t)) => (p, t),
        (Err(s), _) | (_, Err(s)) => return s,
    };
    match hd95(&p, &t) {
        Ok(Some(v)) => {
            unsafe {
                *out = v;
                *defined = true;
            }
            CalsegStatus::Ok
        }
        Ok(None) => {
            unsafe {
                *out = f64::NAN;
                *defined = false;
            }
            CalsegStatus::Ok
        }
        Err(e) => fail_with(e),
    }
}

/// Opaque calibration report over one prediction stream. Create with
/// [`calseg_calibration_new`], read through the getters, release with
/// [`calseg_calibration_free`].
pub struct CalsegCalibration {
    report: CalibrationReport,
}

/// Builds a calibration report from `n` foreground probabilities in
/// [0, 1] and matching 0/1 labels, using `bins` bins for both the
/// equal-width and equal-mass estimators. Returns null on failure; see
/// [`calseg_last_error`].
///
/// # Safety
/// `probs` must point to `n` readable doubles and `labels` to `n`
/// readable bytes.
#[no_mangle]
pub unsafe extern "C" fn calseg_calibration_new(
    probs: *const f64,
    labels: *const u8,
    n: usize,
    bins: usize,
) -> *mut CalsegCalibration {
    if probs.is_null() || labels.is_null() {
        fail(CalsegStatus::NullPointer, "probs and labels must be non-null");
        return std::ptr::null_mut();
    }
    let probs = unsafe { std::slice::from_raw_parts(probs, n) };
    let labels = unsafe { std::slice::from_raw_parts(labels, n) };
    match calibration_report(probs, labels, bins) {
        Ok(report) => Box::into_raw(Box::new(CalsegCalibration { report })),
        Err(e) => {
            fail_with(e);
            std::ptr::null_mut()
        }
    }
}

fn report_stat(handle: *const CalsegCalibration, read: impl Fn(&CalibrationReport) -> f64) -> f64 {
    if handle.is_null() {
        fail(CalsegStatus::NullPointer, "calibration handle is null");
        return f64::NAN;
    }
    read(unsafe { &(*handle).report })
}

/// Expected calibration error (equal-width binning). NaN on a null handle.
///
/// # Safety
/// `handle` must be null or a live pointer from [`calseg_calibration_new`].
#[no_mangle]
pub unsafe extern "C" fn calseg_calibration_ece(handle: *const CalsegCalibration) -> f64 {
    report_stat(handle, |r| r.ece)
}

/// Adaptive calibration error (equal-mass binning). NaN on a null handle.
///
/// # Safety
/// As in [`calseg_calibration_ece`].
#[no_mangle]
pub unsafe extern "C" fn calseg_calibration_ace(handle: *const CalsegCalibration) -> f64 {
    report_stat(handle, |r| r.ace)
}

/// Brier score. NaN on a null handle.
///
/// # Safety
/// As in [`calseg_calibration_ece`].
#[no_mangle]
pub unsafe extern "C" fn calseg_calibration_brier(handle: *const CalsegCalibration) -> f64 {
    report_stat(handle, |r| r.brier)
}

/// Number of equal-width bins in the report; 0 on a null handle.
///
/// # Safety
/// As in [`calseg_calibration_ece`].
#[no_mangle]
pub unsafe extern "C" fn calseg_calibration_bin_count(handle: *const CalsegCalibration) -> usize {
    if handle.is_null() {
        fail(CalsegStatus::NullPointer, "calibration handle is null");
        return 0;
    }
    unsafe { &*handle }.report.bins.len()
}

/// Copies one equal-width bin: half-open range `[lo, hi)` (closed at 1.0
/// for the last bin), member count, and the bin's mean accuracy and
/// confidence (both 0 for an empty bin).
///
/// # Safety
/// `handle` as in [`calseg_calibration_ece`]; the five out-pointers must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn calseg_calibration_bin(
    handle: *const CalsegCalibration,
    index: usize,
    lo: *mut f64,
    hi: *mut f64,
    count: *mut usize,
    accuracy: *mut f64,
    confidence: *mut f64,
) -> CalsegStatus {
    if handle.is_null() {
        return fail(CalsegStatus::NullPointer, "calibration handle is null");
    }
    if lo.is_null() || hi.is_null() || count.is_null() || accuracy.is_null() || confidence.is_null() {
        return fail(CalsegStatus::NullPointer, "all out-pointers must be non-null");
    }
    let report = unsafe { &(*handle).report };
    let Some(bin) = report.bins.get(index) else {
        return fail(
            CalsegStatus::InvalidArgument,
            &format!("bin index {index} out of range, have {}", report.bins.len()),
        );
    };
    unsafe {
        *lo = bin.lo;
        *hi = bin.hi;
        *count = bin.count;
        *accuracy = bin.accuracy;
        *confidence = bin.confidence;
    }
    CalsegStatus::Ok
}

/// Releases a report handle. Null is ignored.
///
/// # Safety
/// `handle` must be null or a pointer from [`calseg_calibration_new`]
/// that has not been freed yet; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn calseg_calibration_free(handle: *mut CalsegCalibration) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Result of a temperature-scaling fit.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalsegTemperatureFit {
    /// Fitted scalar temperature, always positive.
    pub temperature: f64,
    /// Mean negative log-likelihood before scaling.
    pub nll_uncalibrated: f64,
    /// Mean negative log-likelihood at the fitted temperature; never
    /// above the uncalibrated value.
    pub nll_calibrated: f64,
    /// Equal-width calibration error on the fitting stream after scaling.
    pub ece_calibrated: f64,
}

/// Fits one temperature on `n` logits with 0/1 labels by minimizing the
/// negative log-likelihood, searching T in [0.05, 20]. Labels must
/// contain both classes.
///
/// # Safety
/// `logits` must point to `n` readable doubles, `labels` to `n` readable
/// bytes, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn calseg_temperature_fit(
    logits: *const f64,
    labels: *const u8,
    n: usize,
    bins: usize,
    out: *mut CalsegTemperatureFit,
) -> CalsegStatus {
    if logits.is_null() || labels.is_null() || out.is_null() {
        return fail(CalsegStatus::NullPointer, "logits, labels, and out must be non-null");
    }
    let logits = unsafe { std::slice::from_raw_parts(logits, n) };
    let labels = unsafe { std::slice::from_raw_parts(labels, n) };
    match temperature_scale(logits, labels, bins) {
        Ok(fit) => {
            unsafe {
                *out = CalsegTemperatureFit {
                    temperature: fit.temperature,
                    nll_uncalibrated: fit.nll_uncalibrated,
                    nll_calibrated: fit.nll_calibrated,
                    ece_calibrated: fit.ece_calibrated,
                };
            }
            CalsegStatus::Ok
        }
        Err(e) => fail_with(e),
    }
}

/// Measured inputs of the two generalization bounds.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalsegBoundInputs {
    /// Empirical error fraction in [0, 1].
    pub emp_error: f64,
    /// Nonnegative feature Fisher information trace.
    pub fisher_trace: f64,
    /// Sample count, at least 1.
    pub n: usize,
    /// Failure probability in (0, 1).
    pub delta: f64,
    /// Overconfidence term in [0, 1].
    pub epsilon: f64,
    /// Positive constant of the calibration bound; 1.0 is the reporting
    /// convention.
    pub c_constant: f64,
}

fn bound_inputs(c: &CalsegBoundInputs) -> BoundInputs {
    BoundInputs {
        emp_error: c.emp_error,
        fisher_trace: c.fisher_trace,
        n: c.n,
        delta: c.delta,
        epsilon: c.epsilon,
        c_constant: c.c_constant,
    }
}

/// Generalization bound: `emp_error + sqrt((0.5 * I + ln(1/delta)) / (2n))`.
///
/// # Safety
/// `inputs` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn calseg_pac_bayes_bound(inputs: *const CalsegBoundInputs, out: *mut f64) -> CalsegStatus {
    if inputs.is_null() || out.is_null() {
        return fail(CalsegStatus::NullPointer, "inputs and out must be non-null");
    }
    match pac_bayes_bound(&bound_inputs(unsafe { &*inputs })) {
        Ok(v) => {
            unsafe { *out = v };
            CalsegStatus::Ok
        }
        Err(e) => fail_with(e),
    }
}

/// Calibration bound: `sqrt(I / n) + epsilon + C * ln(1/delta) / n`.
///
/// # Safety
/// `inputs` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn calseg_ece_bound(inputs: *const CalsegBoundInputs, out: *mut f64) -> CalsegStatus {
    if inputs.is_null() || out.is_null() {
        return fail(CalsegStatus::NullPointer, "inputs and out must be non-null");
    }
    match ece_bound(&bound_inputs(unsafe { &*inputs })) {
        Ok(v) => {
            unsafe { *out = v };
            CalsegStatus::Ok
        }
        Err(e) => fail_with(e),
    }
}
