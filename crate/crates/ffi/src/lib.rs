//! C ABI over the `rchc` library.
//!
//! Every fallible function returns an [`RchcStatus`]; on failure the message
//! is kept per thread and can be read with [`rchc_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.
//! Output buffers are caller-allocated; their length is passed alongside and
//! must match exactly.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use rchc::autodiff::Tensor;
use rchc::data::{load_csv_dataset, Domain, LabeledDataset};
use rchc::model::{load_checkpoint, ModelParams};
use rchc::pseudo_label::cosine_distance;
use rchc::training::{evaluate, predict_probs, Snapshot};
use rchc::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RchcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Contract = 3,
    Config = 4,
    Parse = 5,
    Io = 6,
    Numeric = 7,
    Clustering = 8,
    Statistics = 9,
    Panic = 10,
}

/// A loaded model checkpoint.
pub struct RchcModel {
    params: ModelParams,
}

/// Inputs with optional labels.
pub struct RchcDataset {
    data: LabeledDataset,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> RchcStatus {
    match e {
        Error::Contract(_) => RchcStatus::Contract,
        Error::NumericInput(_) => RchcStatus::Numeric,
        Error::Config(_) => RchcStatus::Config,
        Error::Parse { .. } => RchcStatus::Parse,
        Error::Clustering { .. } => RchcStatus::Clustering,
        Error::Statistics(_) => RchcStatus::Statistics,
        Error::Io { .. } => RchcStatus::Io,
    }
}

struct Fail(RchcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RchcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            RchcStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RchcStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(RchcStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> Fail {
    Fail(RchcStatus::InvalidArgument, msg)
}

unsafe fn path_from(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, expected: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len != expected {
        return Err(invalid(format!("{what} has length {len}, expected {expected}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length
/// excluding the terminator, so a caller can size a buffer with `len = 0`.
///
/// # Safety
/// `buf` must be null or valid for `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rchc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rchc_model_load(path: *const c_char, out: *mut *mut RchcModel) -> RchcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = load_checkpoint(&path_from(path)?)?;
        *out = Box::into_raw(Box::new(RchcModel { params: ckpt.params }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`rchc_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rchc_model_free(model: *mut RchcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input width, class count and embedding width of a model. Null out
/// pointers are skipped.
///
/// # Safety
/// `model` must be null or a live handle; each out pointer null or writable.
#[no_mangle]
pub unsafe extern "C" fn rchc_model_dims(
    model: *const RchcModel,
    in_dim: *mut usize,
    n_classes: *mut usize,
    embed_dim: *mut usize,
) -> RchcStatus {
    guard(|| {
        let m = &deref(model, "model")?.params;
        for (p, v) in [(in_dim, m.in_dim()), (n_classes, m.n_classes()), (embed_dim, m.embed_dim())] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Loads a CSV of feature rows, with a trailing integer label when
/// `has_labels` is nonzero.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rchc_dataset_load_csv(
    path: *const c_char,
    has_labels: bool,
    out: *mut *mut RchcDataset,
) -> RchcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let data = load_csv_dataset(&path_from(path)?, has_labels, Domain::Target)?;
        *out = Box::into_raw(Box::new(RchcDataset { data }));
        Ok(())
    })
}

/// Builds a dataset from `n * dim` row-major values; `labels` may be null.
///
/// # Safety
/// `values` must hold `n * dim` doubles, `labels` null or `n` entries.
#[no_mangle]
pub unsafe extern "C" fn rchc_dataset_from_rows(
    values: *const f64,
    n: usize,
    dim: usize,
    labels: *const usize,
    out: *mut *mut RchcDataset,
) -> RchcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if values.is_null() {
            return Err(null("values"));
        }
        let count = n.checked_mul(dim).ok_or_else(|| invalid("n * dim overflows".into()))?;
        let inputs = Tensor::new(vec![n, dim], std::slice::from_raw_parts(values, count).to_vec())?;
        let labels = (!labels.is_null()).then(|| std::slice::from_raw_parts(labels, n).to_vec());
        let data = LabeledDataset::new(inputs, labels, Domain::Target)?;
        *out = Box::into_raw(Box::new(RchcDataset { data }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a live handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rchc_dataset_free(dataset: *mut RchcDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of rows; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rchc_dataset_len(dataset: *const RchcDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.data.len())
}

unsafe fn pair<'a>(model: *const RchcModel, dataset: *const RchcDataset) -> Result<(&'a ModelParams, &'a LabeledDataset), Fail> {
    Ok((&deref(model, "model")?.params, &deref(dataset, "dataset")?.data))
}

/// Predicted class per row into `out[len]`, `len` = dataset length.
///
/// # Safety
/// Handles must be live; `out` must hold `len` entries.
#[no_mangle]
pub unsafe extern "C" fn rchc_predict(
    model: *const RchcModel,
    dataset: *const RchcDataset,
    out: *mut usize,
    len: usize,
) -> RchcStatus {
    guard(|| {
        let (m, d) = pair(model, dataset)?;
        let out = out_slice(out, len, d.len(), "out")?;
        out.copy_from_slice(&m.predict(&d.inputs)?);
        Ok(())
    })
}

/// Row-major class probabilities into `out[len]`, `len` = rows * classes.
///
/// # Safety
/// Handles must be live; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rchc_predict_probs(
    model: *const RchcModel,
    dataset: *const RchcDataset,
    out: *mut f64,
    len: usize,
) -> RchcStatus {
    guard(|| {
        let (m, d) = pair(model, dataset)?;
        let out = out_slice(out, len, d.len() * m.n_classes(), "out")?;
        out.copy_from_slice(predict_probs(m, &d.inputs)?.data());
        Ok(())
    })
}

/// Overall accuracy and mean per-class accuracy on a labeled dataset.
///
/// # Safety
/// Handles must be live; out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn rchc_evaluate(
    model: *const RchcModel,
    dataset: *const RchcDataset,
    accuracy: *mut f64,
    mean_class_accuracy: *mut f64,
) -> RchcStatus {
    guard(|| {
        let (m, d) = pair(model, dataset)?;
        if accuracy.is_null() || mean_class_accuracy.is_null() {
            return Err(null("output"));
        }
        let acc = evaluate(m, d)?;
        *accuracy = acc.overall;
        *mean_class_accuracy = acc.mean_per_class;
        Ok(())
    })
}

/// Centroid pseudo-labels, uncertainty ratios and conflict flags (1 when the
/// pseudo-label disagrees with the prediction and the ratio is below
/// `r_th`). Each buffer holds one entry per row.
///
/// # Safety
/// Handles must be live; every buffer must hold `len` entries.
#[no_mangle]
pub unsafe extern "C" fn rchc_pseudo_labels(
    model: *const RchcModel,
    dataset: *const RchcDataset,
    r_th: f64,
    labels: *mut usize,
    ratios: *mut f64,
    flags: *mut u8,
    len: usize,
) -> RchcStatus {
    guard(|| {
        let (m, d) = pair(model, dataset)?;
        if !(0.0..=1.0).contains(&r_th) {
            return Err(invalid(format!("r_th {r_th} outside [0, 1]")));
        }
        let labels = out_slice(labels, len, d.len(), "labels")?;
        let ratios = out_slice(ratios, len, d.len(), "ratios")?;
        let flags = out_slice(flags, len, d.len(), "flags")?;
        let snap = Snapshot::compute(m, &d.inputs, r_th)?;
        labels.copy_from_slice(&snap.table.labels);
        ratios.copy_from_slice(&snap.table.ratios);
        for (f, &b) in flags.iter_mut().zip(&snap.flags) {
            *f = u8::from(b);
        }
        Ok(())
    })
}

/// `1 - u.v / (|u||v| + 1e-12)`.
///
/// # Safety
/// `u` and `v` must each hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rchc_cosine_distance(u: *const f64, v: *const f64, len: usize, out: *mut f64) -> RchcStatus {
    guard(|| {
        if u.is_null() || v.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let (u, v) = (std::slice::from_raw_parts(u, len), std::slice::from_raw_parts(v, len));
        *out = cosine_distance(u, v);
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rchc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
