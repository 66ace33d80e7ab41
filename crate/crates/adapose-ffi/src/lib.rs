//! C ABI for the adapose crate: opaque handles, status codes, and a
//! thread-local last-error message. The header is generated by cbindgen at
//! build time (`include/adapose.h`).
//!
//! Conventions: every fallible call returns [`AdpStatus`] and writes results
//! through out-pointers; handles are created by `*_open`/`*_init` and must be
//! released with the matching `*_free`. Passing a null handle is reported as
//! `AdpStatus::NullPointer`, never a crash.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use adapose::checkpoint::load_params_into;
use adapose::losses::{mmd2, BandwidthSpec, KernelSpec};
use adapose::metrics::{evaluate_dataset, PckConfig};
use adapose::model::{init_params, ModelScale, PoseNetParams};
use adapose::synthcsi::{read_csid, DomainDataset};
use adapose::trainer::{predict_poses, NetPredictor};
use adapose::DiffTensor;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdpStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument was out of range or malformed.
    InvalidArgument = 2,
    /// A path or string argument was not valid UTF-8.
    InvalidUtf8 = 3,
    /// File could not be read or parsed.
    Io = 4,
    /// The operation itself failed; see `adp_last_error`.
    Runtime = 5,
    /// A panic was caught at the boundary.
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul stripped"));
}

fn guard(f: impl FnOnce() -> AdpStatus) -> AdpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            AdpStatus::Internal
        }
    }
}

/// Copies the last error message for the calling thread into `buf` as a
/// nul-terminated string, truncating to `cap` bytes. Returns the full message
/// length in bytes (excluding the terminator), so calling with a null `buf`
/// sizes the message.
#[no_mangle]
pub extern "C" fn adp_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast(), n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

unsafe fn utf8_arg<'a>(ptr: *const c_char) -> Result<&'a str, AdpStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(AdpStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        AdpStatus::InvalidUtf8
    })
}

/// A dataset loaded from a `.csid` file.
pub struct AdpDataset {
    inner: DomainDataset,
}

/// A pose regression network with resolved parameters.
pub struct AdpModel {
    params: PoseNetParams,
}

/// Opens a `.csid` dataset file. On success writes a handle to `out`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn adp_dataset_open(
    path: *const c_char,
    out: *mut *mut AdpDataset,
) -> AdpStatus {
    guard(|| {
        if out.is_null() {
            set_error("null out pointer");
            return AdpStatus::NullPointer;
        }
        let path = match utf8_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match read_csid(std::path::Path::new(path)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(AdpDataset { inner }));
                AdpStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                AdpStatus::Io
            }
        }
    })
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `ds` must come from `adp_dataset_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn adp_dataset_free(ds: *mut AdpDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of CSI windows in the dataset.
///
/// # Safety
/// `ds` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn adp_dataset_len(ds: *const AdpDataset, out: *mut usize) -> AdpStatus {
    guard(|| {
        if ds.is_null() || out.is_null() {
            set_error("null pointer");
            return AdpStatus::NullPointer;
        }
        *out = (*ds).inner.len();
        AdpStatus::Ok
    })
}

/// Window shape as (antenna pairs, subcarriers, frames).
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn adp_dataset_shape(
    ds: *const AdpDataset,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> AdpStatus {
    guard(|| {
        if ds.is_null() || channels.is_null() || height.is_null() || width.is_null() {
            set_error("null pointer");
            return AdpStatus::NullPointer;
        }
        let shape = (*ds).inner.window_shape();
        *channels = shape[0];
        *height = shape[1];
        *width = shape[2];
        AdpStatus::Ok
    })
}

fn resolve_scale(name: &str) -> Result<ModelScale, AdpStatus> {
    ModelScale::by_name(name).ok_or_else(|| {
        set_error(format!("unknown model scale '{name}'"));
        AdpStatus::InvalidArgument
    })
}

/// Creates a freshly initialized model for a named scale ("desk" or "paper").
///
/// # Safety
/// `scale` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn adp_model_init(
    scale: *const c_char,
    seed: u64,
    out: *mut *mut AdpModel,
) -> AdpStatus {
    guard(|| {
        if out.is_null() {
            set_error("null out pointer");
            return AdpStatus::NullPointer;
        }
        let name = match utf8_arg(scale) {
            Ok(s) => s,
            Err(s) => return s,
        };
        let scale = match resolve_scale(name) {
            Ok(s) => s,
            Err(s) => return s,
        };
        match init_params(&scale, seed) {
            Ok(params) => {
                *out = Box::into_raw(Box::new(AdpModel { params }));
                AdpStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                AdpStatus::Runtime
            }
        }
    })
}

/// Loads model parameters from an `.apck` checkpoint for a named scale.
///
/// # Safety
/// `checkpoint` and `scale` must be nul-terminated strings, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn adp_model_open(
    checkpoint: *const c_char,
    scale: *const c_char,
    out: *mut *mut AdpModel,
) -> AdpStatus {
    guard(|| {
        if out.is_null() {
            set_error("null out pointer");
            return AdpStatus::NullPointer;
        }
        let (path, name) = match (utf8_arg(checkpoint), utf8_arg(scale)) {
            (Ok(p), Ok(n)) => (p, n),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let scale = match resolve_scale(name) {
            Ok(s) => s,
            Err(s) => return s,
        };
        let mut params = match init_params(&scale, 0) {
            Ok(p) => p,
            Err(e) => {
                set_error(e.to_string());
                return AdpStatus::Runtime;
            }
        };
        match load_params_into(std::path::Path::new(path), &mut params) {
            Ok(()) => {
                *out = Box::into_raw(Box::new(AdpModel { params }));
                AdpStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                AdpStatus::Io
            }
        }
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from `adp_model_init`/`adp_model_open` and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn adp_model_free(model: *mut AdpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of joints the model predicts per frame.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn adp_model_joint_count(
    model: *const AdpModel,
    out: *mut usize,
) -> AdpStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            set_error("null pointer");
            return AdpStatus::NullPointer;
        }
        *out = (*model).params.scale.joint_count;
        AdpStatus::Ok
    })
}

/// Predicts the pose for one dataset window. `out_xy` receives
/// `joint_count * 2` doubles as interleaved (x, y) pairs.
///
/// # Safety
/// All pointers must be valid; `out_xy` must have room for
/// `adp_model_joint_count` * 2 doubles.
#[no_mangle]
pub unsafe extern "C" fn adp_predict(
    model: *const AdpModel,
    ds: *const AdpDataset,
    index: usize,
    out_xy: *mut f64,
) -> AdpStatus {
    guard(|| {
        if model.is_null() || ds.is_null() || out_xy.is_null() {
            set_error("null pointer");
            return AdpStatus::NullPointer;
        }
        let model = &*model;
        let ds = &(*ds).inner;
        if index >= ds.len() {
            set_error(format!("index {index} out of range for {} windows", ds.len()));
            return AdpStatus::InvalidArgument;
        }
        match predict_poses(&model.params, ds, &[index]) {
            Ok(poses) => {
                for (j, xy) in poses[0].joints.iter().enumerate() {
                    *out_xy.add(2 * j) = xy[0];
                    *out_xy.add(2 * j + 1) = xy[1];
                }
                AdpStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                AdpStatus::Runtime
            }
        }
    })
}

/// Evaluates PCK on a fully labeled dataset. `thresholds` are percentages of
/// torso length; `out_fractions` receives one fraction per threshold, ordered
/// by ascending threshold.
///
/// # Safety
/// All pointers must be valid; `thresholds` and `out_fractions` must hold
/// `n_thresholds` doubles each.
#[no_mangle]
pub unsafe extern "C" fn adp_evaluate_pck(
    model: *const AdpModel,
    ds: *const AdpDataset,
    thresholds: *const f64,
    n_thresholds: usize,
    out_fractions: *mut f64,
) -> AdpStatus {
    guard(|| {
        if model.is_null() || ds.is_null() || thresholds.is_null() || out_fractions.is_null() {
            set_error("null pointer");
            return AdpStatus::NullPointer;
        }
        if n_thresholds == 0 {
            set_error("need at least one threshold");
            return AdpStatus::InvalidArgument;
        }
        let config = PckConfig {
            thresholds: std::slice::from_raw_parts(thresholds, n_thresholds).to_vec(),
            ..Default::default()
        };
        let predictor = NetPredictor(&(*model).params);
        match evaluate_dataset(&predictor, &(*ds).inner, &config, 32) {
            Ok(report) => {
                for (i, &f) in report.fractions.iter().enumerate() {
                    *out_fractions.add(i) = f;
                }
                AdpStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                AdpStatus::Runtime
            }
        }
    })
}

/// Biased squared MMD between two row-major point sets of `dim` columns.
/// With `n_bandwidths == 0` the linear kernel is used; otherwise a sum of
/// RBF kernels with the given bandwidths (squared length scales).
///
/// # Safety
/// `xs` must hold `n_xs * dim` doubles, `xt` `n_xt * dim`, `bandwidths`
/// `n_bandwidths`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn adp_mmd2(
    xs: *const f64,
    n_xs: usize,
    xt: *const f64,
    n_xt: usize,
    dim: usize,
    bandwidths: *const f64,
    n_bandwidths: usize,
    out: *mut f64,
) -> AdpStatus {
    guard(|| {
        if xs.is_null() || xt.is_null() || out.is_null() {
            set_error("null pointer");
            return AdpStatus::NullPointer;
        }
        if n_xs == 0 || n_xt == 0 || dim == 0 {
            set_error("point sets must be nonempty with positive dimension");
            return AdpStatus::InvalidArgument;
        }
        let spec = if n_bandwidths == 0 {
            KernelSpec::Linear
        } else {
            if bandwidths.is_null() {
                set_error("null bandwidths with n_bandwidths > 0");
                return AdpStatus::NullPointer;
            }
            KernelSpec::RbfMulti(BandwidthSpec::Fixed(
                std::slice::from_raw_parts(bandwidths, n_bandwidths).to_vec(),
            ))
        };
        let tensor = |ptr: *const f64, n: usize| {
            DiffTensor::new(vec![n, dim], std::slice::from_raw_parts(ptr, n * dim).to_vec())
                .expect("shape matches data")
        };
        match mmd2(&tensor(xs, n_xs), &tensor(xt, n_xt), &spec) {
            Ok(v) => {
                *out = v;
                AdpStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                AdpStatus::Runtime
            }
        }
    })
}
