//! C ABI for the soft-sensor engine.
//!
//! Bindings load a trained checkpoint into an opaque handle and run
//! predictions on raw (unstandardized) lagged input rows; standardization and
//! de-standardization happen inside using the statistics embedded in the
//! checkpoint. All functions return a status code; the last error message is
//! kept per thread and retrievable with [`ssvaer_last_error`].
//!
//! The matching header lives at `include/ssvaer.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ssvaer_core::dataset::Matrix;
use ssvaer_core::harness::{predict_ci, Checkpoint};
use ssvaer_core::models::predict_y;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsvaerStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    LoadFailed = 3,
    PredictFailed = 4,
    BadLevel = 5,
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

/// Opaque trained-model handle.
pub struct SsvaerModel {
    checkpoint: Checkpoint,
}

/// Version string of the library; static storage, do not free.
#[no_mangle]
pub extern "C" fn ssvaer_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Copy the last error message for this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length in bytes, excluding
/// the terminator.
///
/// # Safety
/// `buf` must point to at least `cap` writable bytes, or be null (in which
/// case only the length is returned).
#[no_mangle]
pub unsafe extern "C" fn ssvaer_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Load a checkpoint file into a freshly allocated model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_model` must be a valid
/// pointer to receive the handle. A non-null result handle must be released
/// with [`ssvaer_model_free`].
#[no_mangle]
pub unsafe extern "C" fn ssvaer_model_load(
    path: *const c_char,
    out_model: *mut *mut SsvaerModel,
) -> SsvaerStatus {
    if path.is_null() || out_model.is_null() {
        set_error("null argument");
        return SsvaerStatus::NullArgument;
    }
    *out_model = std::ptr::null_mut();
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("path is not valid UTF-8");
            return SsvaerStatus::InvalidUtf8;
        }
    };
    let result = catch_unwind(|| Checkpoint::load(Path::new(path)));
    match result {
        Ok(Ok(checkpoint)) => {
            let handle = Box::new(SsvaerModel { checkpoint });
            *out_model = Box::into_raw(handle);
            SsvaerStatus::Ok
        }
        Ok(Err(e)) => {
            set_error(&e.to_string());
            SsvaerStatus::LoadFailed
        }
        Err(_) => {
            set_error("internal panic while loading checkpoint");
            SsvaerStatus::Panic
        }
    }
}

/// Release a handle produced by [`ssvaer_model_load`]. Null is a no-op.
///
/// # Safety
/// `model` must be a pointer returned by [`ssvaer_model_load`] that has not
/// been freed yet.
#[no_mangle]
pub unsafe extern "C" fn ssvaer_model_free(model: *mut SsvaerModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Width of one input row (the lagged feature vector) the model expects.
///
/// # Safety
/// `model` must be a live handle from [`ssvaer_model_load`].
#[no_mangle]
pub unsafe extern "C" fn ssvaer_model_input_width(model: *const SsvaerModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).checkpoint.model.input_width()
}

unsafe fn rows_matrix(
    model: &SsvaerModel,
    rows: *const f64,
    n_rows: usize,
) -> Result<Matrix, SsvaerStatus> {
    if rows.is_null() || n_rows == 0 {
        set_error("null or empty input rows");
        return Err(SsvaerStatus::NullArgument);
    }
    let width = model.checkpoint.model.input_width();
    let raw = std::slice::from_raw_parts(rows, n_rows * width);
    let m = Matrix {
        rows: n_rows,
        cols: width,
        data: raw.to_vec(),
    };
    Ok(model.checkpoint.standardizer.transform(&m))
}

/// Predict the quality variable for `n_rows` rows of raw lagged inputs
/// (row-major, `n_rows x input_width`). Writes de-standardized means and
/// variances into the caller's buffers (`out_var` may be null).
///
/// # Safety
/// `model` must be a live handle; `rows` must hold `n_rows * input_width`
/// doubles; `out_mean` (and `out_var` when non-null) must hold `n_rows`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn ssvaer_predict(
    model: *const SsvaerModel,
    rows: *const f64,
    n_rows: usize,
    out_mean: *mut f64,
    out_var: *mut f64,
) -> SsvaerStatus {
    if model.is_null() || out_mean.is_null() {
        set_error("null argument");
        return SsvaerStatus::NullArgument;
    }
    let model = &*model;
    let x = match rows_matrix(model, rows, n_rows) {
        Ok(m) => m,
        Err(status) => return status,
    };
    let result = catch_unwind(AssertUnwindSafe(|| {
        predict_y(
            &model.checkpoint.model,
            &x,
            model.checkpoint.standardizer.label_mean,
            model.checkpoint.standardizer.label_scale,
        )
    }));
    match result {
        Ok(Ok((mean, var))) => {
            std::ptr::copy_nonoverlapping(mean.as_ptr(), out_mean, n_rows);
            if !out_var.is_null() {
                std::ptr::copy_nonoverlapping(var.as_ptr(), out_var, n_rows);
            }
            SsvaerStatus::Ok
        }
        Ok(Err(e)) => {
            set_error(&e.to_string());
            SsvaerStatus::PredictFailed
        }
        Err(_) => {
            set_error("internal panic during prediction");
            SsvaerStatus::Panic
        }
    }
}

/// Predict with two-sided confidence bounds at `level` (in (0, 1)). Buffers
/// as in [`ssvaer_predict`]; `out_lower`/`out_upper` hold `n_rows` doubles.
///
/// # Safety
/// Same contracts as [`ssvaer_predict`] plus valid `out_lower`/`out_upper`.
#[no_mangle]
pub unsafe extern "C" fn ssvaer_predict_ci(
    model: *const SsvaerModel,
    rows: *const f64,
    n_rows: usize,
    level: f64,
    out_mean: *mut f64,
    out_lower: *mut f64,
    out_upper: *mut f64,
) -> SsvaerStatus {
    if model.is_null() || out_mean.is_null() || out_lower.is_null() || out_upper.is_null() {
        set_error("null argument");
        return SsvaerStatus::NullArgument;
    }
    if !(level > 0.0 && level < 1.0) {
        set_error("confidence level must be in (0, 1)");
        return SsvaerStatus::BadLevel;
    }
    let model = &*model;
    let x = match rows_matrix(model, rows, n_rows) {
        Ok(m) => m,
        Err(status) => return status,
    };
    let result = catch_unwind(AssertUnwindSafe(|| {
        predict_ci(
            &model.checkpoint.model,
            &x,
            &model.checkpoint.standardizer,
            level,
        )
    }));
    match result {
        Ok(Ok(ci)) => {
            for (i, row) in ci.iter().enumerate() {
                *out_mean.add(i) = row.mean;
                *out_lower.add(i) = row.lower;
                *out_upper.add(i) = row.upper;
            }
            SsvaerStatus::Ok
        }
        Ok(Err(e)) => {
            set_error(&e.to_string());
            SsvaerStatus::PredictFailed
        }
        Err(_) => {
            set_error("internal panic during prediction");
            SsvaerStatus::Panic
        }
    }
}
