//! C ABI over checkpoint IO and data-free merging.
//!
//! Models are opaque handles; every fallible call returns an [`AbmStatus`]
//! and leaves a human-readable message retrievable with
//! [`abm_last_error_message`]. The generated header lands in
//! `include/abm.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use abm_core::checkpoint::{read_checkpoint, write_checkpoint, CkptError};
use abm_core::merge::{compute_task_vector, merge, MergeConfig, MergeError, MergeMethod};
use abm_core::params::ParameterMap;

/// Status codes shared with the CLI's exit-code taxonomy.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum AbmStatus {
    Ok = 0,
    ShapeMismatch = 2,
    Io = 3,
    Numeric = 4,
    Usage = 6,
}

/// Merge algorithm selector.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum AbmMergeMethod {
    Average = 0,
    Tsvm = 1,
    Wudi = 2,
}

/// Opaque parameter-map handle.
pub struct AbmModel {
    params: ParameterMap,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl std::fmt::Display) {
    let rendered = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(rendered).unwrap_or_default();
    });
}

fn ckpt_status(e: &CkptError) -> AbmStatus {
    match e {
        CkptError::Io { .. } => AbmStatus::Io,
        CkptError::NanPayload { .. } => AbmStatus::Numeric,
        _ => AbmStatus::ShapeMismatch,
    }
}

fn merge_status(e: &MergeError) -> AbmStatus {
    match e {
        MergeError::Incompatible(_) => AbmStatus::ShapeMismatch,
        MergeError::NoModels | MergeError::NoExperts => AbmStatus::Usage,
        _ => AbmStatus::Numeric,
    }
}

/// # Safety
/// `path` must be a NUL-terminated string.
unsafe fn path_from(ptr_path: *const c_char) -> Result<std::path::PathBuf, AbmStatus> {
    if ptr_path.is_null() {
        set_error("null path");
        return Err(AbmStatus::Usage);
    }
    match CStr::from_ptr(ptr_path).to_str() {
        Ok(s) => Ok(Path::new(s).to_path_buf()),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(AbmStatus::Usage)
        }
    }
}

/// Copy of the most recent error message for this thread; always
/// NUL-terminated, truncated to `len`.
#[no_mangle]
pub unsafe extern "C" fn abm_last_error_message(buf: *mut c_char, len: usize) -> usize {
    if buf.is_null() || len == 0 {
        return 0;
    }
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        let n = bytes.len().min(len - 1);
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
        *buf.add(n) = 0;
        n
    })
}

/// Read an ABM-CKPT v1 file into a new model handle.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn abm_checkpoint_read(
    path: *const c_char,
    out: *mut *mut AbmModel,
) -> AbmStatus {
    if out.is_null() {
        set_error("null output handle");
        return AbmStatus::Usage;
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match read_checkpoint(path) {
        Ok(params) => {
            *out = Box::into_raw(Box::new(AbmModel { params }));
            AbmStatus::Ok
        }
        Err(e) => {
            let status = ckpt_status(&e);
            set_error(e);
            status
        }
    }
}

/// Serialize a model handle to an ABM-CKPT v1 file.
///
/// # Safety
/// `model` must be a live handle from this library; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn abm_checkpoint_write(
    model: *const AbmModel,
    path: *const c_char,
) -> AbmStatus {
    let Some(model) = model.as_ref() else {
        set_error("null model handle");
        return AbmStatus::Usage;
    };
    let path = match path_from(path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match write_checkpoint(&model.params, path) {
        Ok(_) => AbmStatus::Ok,
        Err(e) => {
            let status = ckpt_status(&e);
            set_error(e);
            status
        }
    }
}

/// Release a model handle.
///
/// # Safety
/// `model` must have come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn abm_model_free(model: *mut AbmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of named tensors in the model.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn abm_model_num_tensors(model: *const AbmModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.len())
}

/// Total number of scalar parameters.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn abm_model_numel(model: *const AbmModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.numel())
}

/// Copy the name of tensor `index` (lexicographic order) into `buf`.
/// Returns the name's byte length, or 0 when out of range.
///
/// # Safety
/// `model` live; `buf` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn abm_model_tensor_name(
    model: *const AbmModel,
    index: usize,
    buf: *mut c_char,
    len: usize,
) -> usize {
    let Some(model) = model.as_ref() else { return 0 };
    let Some(name) = model.params.names().nth(index) else {
        return 0;
    };
    if !buf.is_null() && len > 0 {
        let n = name.len().min(len - 1);
        ptr::copy_nonoverlapping(name.as_ptr(), buf as *mut u8, n);
        *buf.add(n) = 0;
    }
    name.len()
}

/// Copy a named tensor's data into `out` (row-major f32). Writes the
/// element count to `out_numel` when non-null.
///
/// # Safety
/// `model` live; `name` NUL-terminated; `out` writable for `capacity`.
#[no_mangle]
pub unsafe extern "C" fn abm_model_tensor_data(
    model: *const AbmModel,
    name: *const c_char,
    out: *mut f32,
    capacity: usize,
    out_numel: *mut usize,
) -> AbmStatus {
    let Some(model) = model.as_ref() else {
        set_error("null model handle");
        return AbmStatus::Usage;
    };
    if name.is_null() {
        set_error("null tensor name");
        return AbmStatus::Usage;
    }
    let Ok(name) = CStr::from_ptr(name).to_str() else {
        set_error("tensor name is not valid UTF-8");
        return AbmStatus::Usage;
    };
    let Some(tensor) = model.params.get(name) else {
        set_error(format!("no tensor named {name:?}"));
        return AbmStatus::Usage;
    };
    if !out_numel.is_null() {
        *out_numel = tensor.numel();
    }
    if !out.is_null() {
        if capacity < tensor.numel() {
            set_error(format!(
                "buffer holds {capacity} elements, tensor needs {}",
                tensor.numel()
            ));
            return AbmStatus::Usage;
        }
        ptr::copy_nonoverlapping(tensor.data().as_ptr(), out, tensor.numel());
    }
    AbmStatus::Ok
}

/// Merge `n_experts` expert models over a base model. `iters` and `lr`
/// follow the reconcile-stage recipe; pass 0 / 0.0 for the defaults
/// (1000 iterations, 1e-5).
///
/// # Safety
/// All handles must be live; `experts` must point to `n_experts` handles;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn abm_merge(
    base: *const AbmModel,
    experts: *const *const AbmModel,
    n_experts: usize,
    method: AbmMergeMethod,
    iters: usize,
    lr: f64,
    seed: u64,
    out: *mut *mut AbmModel,
) -> AbmStatus {
    let Some(base) = base.as_ref() else {
        set_error("null base handle");
        return AbmStatus::Usage;
    };
    if experts.is_null() || n_experts == 0 || out.is_null() {
        set_error("need at least one expert and an output slot");
        return AbmStatus::Usage;
    }
    let mut tvs = Vec::with_capacity(n_experts);
    for i in 0..n_experts {
        let Some(expert) = (*experts.add(i)).as_ref() else {
            set_error(format!("null expert handle at index {i}"));
            return AbmStatus::Usage;
        };
        match compute_task_vector(&expert.params, &base.params, format!("expert{i}")) {
            Ok(tv) => tvs.push(tv),
            Err(e) => {
                let status = merge_status(&e);
                set_error(e);
                return status;
            }
        }
    }
    let defaults = MergeConfig::default();
    let cfg = MergeConfig {
        method: match method {
            AbmMergeMethod::Average => MergeMethod::Avg,
            AbmMergeMethod::Tsvm => MergeMethod::Tsvm,
            AbmMergeMethod::Wudi => MergeMethod::Wudi,
        },
        iterations: if iters == 0 { defaults.iterations } else { iters },
        learning_rate: if lr <= 0.0 { defaults.learning_rate } else { lr },
        seed,
        ..defaults
    };
    match merge(&base.params, &tvs, &cfg) {
        Ok((params, _report)) => {
            *out = Box::into_raw(Box::new(AbmModel { params }));
            AbmStatus::Ok
        }
        Err(e) => {
            let status = merge_status(&e);
            set_error(e);
            status
        }
    }
}
