//! C ABI for the dehaze library: load a checkpoint, run a decode mode on a
//! PNG, free the handle. All functions return a status code; the last error
//! message is retrievable per thread.

use dehaze_core::ckpt::Checkpoint;
use dehaze_core::imgio;
use dehaze_core::infer::{decode_with_mode, DecodeMode, DecodeOptions};
use dehaze_core::nn::DehazeModel;
use dehaze_core::train::model_from_checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

/// Status codes returned by every FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DehazeStatus {
    DehazeOk = 0,
    DehazeInvalidArgument = 1,
    DehazeIoError = 2,
    DehazeRuntimeError = 3,
}

/// Decode strategy selector for `dehaze_run`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DehazeMode {
    DehazeModeCritic = 0,
    DehazeModeConfidence = 1,
    DehazeModeNn = 2,
    DehazeModeOneshot = 3,
}

/// Opaque model handle; create with `dehaze_model_load`, release with
/// `dehaze_model_free`.
pub struct DehazeModelHandle {
    model: DehazeModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next FFI call on the same thread.
#[no_mangle]
pub extern "C" fn dehaze_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, DehazeStatus> {
    if ptr.is_null() {
        set_error("null path argument");
        return Err(DehazeStatus::DehazeInvalidArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(DehazeStatus::DehazeInvalidArgument)
        }
    }
}

/// Load a trained checkpoint. On success writes a heap-allocated handle to
/// `out_model` and returns `DehazeOk`.
///
/// # Safety
/// `ckpt_path` must be a valid NUL-terminated string; `out_model` must be a
/// valid pointer to writable memory.
#[no_mangle]
pub unsafe extern "C" fn dehaze_model_load(
    ckpt_path: *const c_char,
    out_model: *mut *mut DehazeModelHandle,
) -> DehazeStatus {
    if out_model.is_null() {
        set_error("null out_model");
        return DehazeStatus::DehazeInvalidArgument;
    }
    let path = match path_arg(ckpt_path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let ck = match Checkpoint::load(path) {
        Ok(c) => c,
        Err(e) => {
            set_error(&format!("loading checkpoint: {e}"));
            return DehazeStatus::DehazeIoError;
        }
    };
    match model_from_checkpoint(&ck) {
        Ok(model) => {
            *out_model = Box::into_raw(Box::new(DehazeModelHandle { model }));
            DehazeStatus::DehazeOk
        }
        Err(e) => {
            set_error(&format!("building model: {e}"));
            DehazeStatus::DehazeRuntimeError
        }
    }
}

/// Release a handle returned by `dehaze_model_load`. Passing NULL is a no-op.
///
/// # Safety
/// `model` must be a pointer previously returned by `dehaze_model_load`
/// that has not already been freed.
#[no_mangle]
pub unsafe extern "C" fn dehaze_model_free(model: *mut DehazeModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Dehaze `input_path` (PNG) into `output_path` using `iters` decode
/// iterations of the chosen mode.
///
/// # Safety
/// `model` must be a live handle; both paths must be valid NUL-terminated
/// strings.
#[no_mangle]
pub unsafe extern "C" fn dehaze_run(
    model: *const DehazeModelHandle,
    input_path: *const c_char,
    output_path: *const c_char,
    iters: u32,
    mode: DehazeMode,
    seed: u64,
) -> DehazeStatus {
    if model.is_null() {
        set_error("null model handle");
        return DehazeStatus::DehazeInvalidArgument;
    }
    if iters < 1 {
        set_error("iters must be >= 1");
        return DehazeStatus::DehazeInvalidArgument;
    }
    let input = match path_arg(input_path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let output = match path_arg(output_path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let handle = &*model;
    let img = match imgio::load_png(input) {
        Ok(i) => i,
        Err(e) => {
            set_error(&format!("reading {}: {e}", input.display()));
            return DehazeStatus::DehazeIoError;
        }
    };
    let mode = match mode {
        DehazeMode::DehazeModeCritic => DecodeMode::Critic,
        DehazeMode::DehazeModeConfidence => DecodeMode::Confidence,
        DehazeMode::DehazeModeNn => DecodeMode::Nn,
        DehazeMode::DehazeModeOneshot => DecodeMode::Oneshot,
    };
    let opts = DecodeOptions {
        iters: iters as usize,
        ..DecodeOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = match decode_with_mode(&img, &handle.model, mode, &opts, &mut rng) {
        Ok((o, _)) => o,
        Err(e) => {
            set_error(&format!("decoding: {e}"));
            return DehazeStatus::DehazeRuntimeError;
        }
    };
    match imgio::save_png(output, &out) {
        Ok(()) => DehazeStatus::DehazeOk,
        Err(e) => {
            set_error(&format!("writing {}: {e}", output.display()));
            DehazeStatus::DehazeIoError
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_arguments_are_rejected() {
        unsafe {
            let mut out: *mut DehazeModelHandle = std::ptr::null_mut();
            assert_eq!(
                dehaze_model_load(std::ptr::null(), &mut out),
                DehazeStatus::DehazeInvalidArgument
            );
            assert_eq!(
                dehaze_run(
                    std::ptr::null(),
                    std::ptr::null(),
                    std::ptr::null(),
                    8,
                    DehazeMode::DehazeModeCritic,
                    0
                ),
                DehazeStatus::DehazeInvalidArgument
            );
            dehaze_model_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn missing_checkpoint_reports_io_error() {
        unsafe {
            let path = CString::new("/nonexistent/model.ckpt").unwrap();
            let mut out: *mut DehazeModelHandle = std::ptr::null_mut();
            assert_eq!(
                dehaze_model_load(path.as_ptr(), &mut out),
                DehazeStatus::DehazeIoError
            );
            let msg = CStr::from_ptr(dehaze_last_error()).to_str().unwrap();
            assert!(msg.contains("checkpoint"));
        }
    }
}
