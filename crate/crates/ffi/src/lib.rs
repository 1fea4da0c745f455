//! C interface to fakeit.
//!
//! Models are opaque handles created by [`fk_model_load`] and released with
//! [`fk_model_free`]. Every fallible function returns an [`FkStatus`]; on
//! anything other than `FK_STATUS_OK`, [`fk_last_error_message`] describes
//! the failure. Messages are kept per thread.
//!
//! No function unwinds across the boundary: a panic inside the library is
//! caught and reported as `FK_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fakeit::bundle::load_model;
use fakeit::eval::{compute_metrics, confusion_matrix};
use fakeit::image::RawImage;
use fakeit::model::{Mode, Model};
use fakeit::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FkStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string was not UTF-8, a size was inconsistent, or a label was
    /// out of range.
    InvalidArgument = 2,
    /// The file could not be read.
    Io = 3,
    /// The file was read but is not a valid model bundle.
    Format = 4,
    /// The model cannot serve the request (for example a fused model
    /// called without an image).
    Contract = 5,
    /// A computation produced a non-finite value or failed internally.
    Compute = 6,
    /// The library panicked; the handle involved should be freed.
    Panic = 7,
}

/// Which inputs a model consumes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FkMode {
    TextOnly = 0,
    ImageOnly = 1,
    Fused = 2,
}

impl From<Mode> for FkMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::TextOnly => FkMode::TextOnly,
            Mode::ImageOnly => FkMode::ImageOnly,
            Mode::Fused => FkMode::Fused,
        }
    }
}

/// Opaque model handle.
pub struct FkModel {
    model: Model,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FkPrediction {
    /// 0 = fake, 1 = genuine.
    pub label: u32,
    pub p_fake: f64,
    pub p_genuine: f64,
}

/// Binary metrics with genuine (label 1) as the positive class.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FkMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Nonzero when a ratio had a zero denominator and was reported as 0.
    pub degenerate: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    // interior NULs would truncate the message on the C side
    let clean = message.replace('\0', " ");
    let c = CString::new(clean).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: FkStatus, message: impl Into<String>) -> FkStatus {
    set_error(message.into());
    status
}

fn status_of(e: &Error) -> FkStatus {
    match e {
        Error::Io { .. } => FkStatus::Io,
        Error::Format(_) | Error::Manifest { .. } => FkStatus::Format,
        Error::Contract(_) => FkStatus::Contract,
        Error::Label(_) | Error::Parameter(_) | Error::Config(_) | Error::Dimension(_) => {
            FkStatus::InvalidArgument
        }
        _ => FkStatus::Compute,
    }
}

/// Runs `f`, converting errors and panics into a status and message.
fn guard(f: impl FnOnce() -> Result<(), FkStatus>) -> FkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FkStatus::Ok,
        Ok(Err(status)) => status,
        Err(payload) => {
            let what = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(FkStatus::Panic, format!("internal panic: {what}"))
        }
    }
}

fn lift<T>(r: fakeit::Result<T>) -> Result<T, FkStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn utf8<'a>(s: *const c_char, what: &str) -> Result<&'a str, FkStatus> {
    if s.is_null() {
        return Err(fail(FkStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(FkStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread, or null if there
/// has been none. The pointer stays valid until the next failing call on
/// the same thread.
#[no_mangle]
pub extern "C" fn fk_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a model bundle. On success `*out` receives a handle that must be
/// released with [`fk_model_free`]; on failure it is set to null.
///
/// # Safety
/// `path` must be null or a NUL-terminated string; `out` must be null or
/// point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn fk_model_load(path: *const c_char, out: *mut *mut FkModel) -> FkStatus {
    if out.is_null() {
        return fail(FkStatus::NullPointer, "out is null");
    }
    *out = ptr::null_mut();
    guard(|| {
        let path = utf8(path, "path")?;
        let model = lift(load_model(Path::new(path)))?;
        *out = Box::into_raw(Box::new(FkModel { model }));
        Ok(())
    })
}

/// Releases a handle from [`fk_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fk_model_free(model: *mut FkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be null or a live handle; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn fk_model_mode(model: *const FkModel, out: *mut FkMode) -> FkStatus {
    if model.is_null() || out.is_null() {
        return fail(FkStatus::NullPointer, "model or out is null");
    }
    *out = (*model).model.mode().into();
    FkStatus::Ok
}

/// Classifies one review. `text` may be null for image-only models;
/// `rgb` may be null for text-only models, otherwise it holds
/// `width * height * 3` bytes of row-major RGB.
///
/// # Safety
/// Pointers must be null or valid for the sizes described above.
#[no_mangle]
pub unsafe extern "C" fn fk_model_predict(
    model: *const FkModel,
    text: *const c_char,
    rgb: *const u8,
    width: usize,
    height: usize,
    out: *mut FkPrediction,
) -> FkStatus {
    if model.is_null() || out.is_null() {
        return fail(FkStatus::NullPointer, "model or out is null");
    }
    let model = &(*model).model;
    guard(|| {
        let text = if text.is_null() { None } else { Some(utf8(text, "text")?) };
        let image = if rgb.is_null() {
            None
        } else {
            let len = width
                .checked_mul(height)
                .and_then(|n| n.checked_mul(3))
                .ok_or_else(|| fail(FkStatus::InvalidArgument, "image size overflows"))?;
            let pixels = std::slice::from_raw_parts(rgb, len).to_vec();
            Some(lift(RawImage::new(width, height, pixels))?)
        };
        let input = lift(model.prepare(text, image.as_ref()))?;
        let probs = lift(model.probabilities(&input))?;
        let label = lift(model.predict(&input))?;
        *out = FkPrediction {
            label: label as u32,
            p_fake: probs[0],
            p_genuine: probs[1],
        };
        Ok(())
    })
}

/// Confusion counts and metrics for `n` predicted and gold labels (each 0
/// or 1).
///
/// # Safety
/// `preds` and `golds` must each point to `n` values (or be null when `n`
/// is 0); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fk_metrics_compute(
    preds: *const u32,
    golds: *const u32,
    n: usize,
    out: *mut FkMetrics,
) -> FkStatus {
    if out.is_null() || (n > 0 && (preds.is_null() || golds.is_null())) {
        return fail(FkStatus::NullPointer, "labels or out is null");
    }
    guard(|| {
        let widen = |p: *const u32| -> Vec<usize> {
            if n == 0 {
                Vec::new()
            } else {
                std::slice::from_raw_parts(p, n).iter().map(|&l| l as usize).collect()
            }
        };
        let cm = lift(confusion_matrix(&widen(preds), &widen(golds)))?;
        let m = compute_metrics(&cm);
        *out = FkMetrics {
            tp: cm.tp,
            fp: cm.fp,
            fn_: cm.fn_,
            tn: cm.tn,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            degenerate: m.degenerate as u8,
        };
        Ok(())
    })
}
