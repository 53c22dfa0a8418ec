//! C ABI over `jf-core`.
//!
//! Models are opaque `JfModel` handles created by [`jf_model_load`] and
//! released with [`jf_model_free`]. Every fallible call returns a
//! [`JfStatus`]; on failure [`jf_last_error_message`] describes the most recent
//! error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use jf_core::decoding::{ar_greedy_decode, early_exit_decode, jacobi_decode, JacobiOptions};
use jf_core::distill::task_from_meta;
use jf_core::model::{load_checkpoint, ModelWeights};
use jf_core::task::{detokenize_chunk, TaskSpec};
use jf_core::{Error, TokenSequence};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Format = 5,
    Dimension = 6,
    Contract = 7,
    Index = 8,
    Capacity = 9,
    ConvergenceFailure = 10,
    Numeric = 11,
    Internal = 99,
}

/// Decoding strategy for [`jf_decode`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JfMethod {
    Ar = 0,
    Jacobi = 1,
    EarlyExit = 2,
}

/// Opaque model handle.
pub struct JfModel {
    weights: ModelWeights,
    task: TaskSpec,
}

/// Per-call decode statistics.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct JfDecodeStats {
    pub iterations: usize,
    pub duration_us: f64,
    pub tokens_per_s: f64,
    /// Nonzero if early exit stopped before the fixed point.
    pub forced_exit: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> JfStatus {
    match err {
        Error::Io { .. } => JfStatus::Io,
        Error::Format(_) => JfStatus::Format,
        Error::Dimension { .. } => JfStatus::Dimension,
        Error::Contract(_) | Error::Config(_) | Error::Range { .. } => JfStatus::Contract,
        Error::Index { .. } => JfStatus::Index,
        Error::Capacity { .. } => JfStatus::Capacity,
        Error::ConvergenceFailure { .. } => JfStatus::ConvergenceFailure,
        Error::Numeric(_) | Error::Training { .. } => JfStatus::Numeric,
        Error::Staleness { .. } => JfStatus::Internal,
    }
}

fn fail(status: JfStatus, msg: impl Into<String>) -> JfStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> JfStatus) -> JfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == JfStatus::Ok {
                LAST_ERROR.with(|e| *e.borrow_mut() = None);
            }
            s
        }
        Err(_) => fail(JfStatus::Internal, "panic inside jf"),
    }
}

fn from_core(err: Error) -> JfStatus {
    fail(status_of(&err), err.to_string())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn jf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn jf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint. On success `*out` owns a handle for [`jf_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn jf_model_load(path: *const c_char, out: *mut *mut JfModel) -> JfStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(JfStatus::NullPointer, "null argument");
        }
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(JfStatus::InvalidArgument, "path is not valid UTF-8");
        };
        let weights = match load_checkpoint(path) {
            Ok(w) => w,
            Err(e) => return from_core(e),
        };
        let task = match task_from_meta(&weights) {
            Ok(t) => t.unwrap_or_default(),
            Err(e) => return from_core(e),
        };
        *out = Box::into_raw(Box::new(JfModel { weights, task }));
        JfStatus::Ok
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from [`jf_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn jf_model_free(model: *mut JfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Action tokens per decoded chunk for the model's task.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn jf_model_block_len(model: *const JfModel) -> usize {
    model.as_ref().map_or(0, |m| m.task.block_len())
}

/// Vocabulary size of the model.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn jf_model_vocab_size(model: *const JfModel) -> usize {
    model.as_ref().map_or(0, |m| m.weights.config().vocab_size)
}

/// Decodes `n` tokens after `prompt` into `out` (capacity `out_cap`).
/// `exit_point` is read only for [`JfMethod::EarlyExit`]; `seed` picks the
/// Jacobi initial guess. `stats` may be NULL.
///
/// # Safety
/// `prompt` must point to `prompt_len` ids and `out` to `out_cap` writable ids.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn jf_decode(
    model: *const JfModel,
    method: JfMethod,
    prompt: *const u32,
    prompt_len: usize,
    n: usize,
    exit_point: usize,
    seed: u64,
    out: *mut u32,
    out_cap: usize,
    stats: *mut JfDecodeStats,
) -> JfStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(JfStatus::NullPointer, "null model");
        };
        if prompt.is_null() || out.is_null() {
            return fail(JfStatus::NullPointer, "null buffer");
        }
        if out_cap < n {
            return fail(JfStatus::BufferTooSmall, format!("need {n} slots, got {out_cap}"));
        }
        let prompt = TokenSequence::new(std::slice::from_raw_parts(prompt, prompt_len).to_vec());
        let result = match method {
            JfMethod::Ar => ar_greedy_decode(&m.weights, &prompt, n),
            JfMethod::Jacobi => {
                jacobi_decode(&m.weights, &prompt, n, &JacobiOptions::new(seed)).map(|(t, r)| (t.fixed_point, r))
            }
            JfMethod::EarlyExit => early_exit_decode(&m.weights, &prompt, n, exit_point, seed),
        };
        let (tokens, report) = match result {
            Ok(v) => v,
            Err(e) => return from_core(e),
        };
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&tokens);
        if let Some(s) = stats.as_mut() {
            *s = JfDecodeStats {
                iterations: report.iterations,
                duration_us: report.duration.as_secs_f64() * 1e6,
                tokens_per_s: report.tokens_per_s,
                forced_exit: report.forced_exit as u8,
            };
        }
        JfStatus::Ok
    })
}

/// Maps action tokens to continuous values (bin centres), 7 per action.
/// `out` needs `len` slots.
///
/// # Safety
/// `tokens` must point to `len` ids and `out` to `out_cap` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn jf_detokenize(
    model: *const JfModel,
    tokens: *const u32,
    len: usize,
    out: *mut f64,
    out_cap: usize,
) -> JfStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(JfStatus::NullPointer, "null model");
        };
        if tokens.is_null() || out.is_null() {
            return fail(JfStatus::NullPointer, "null buffer");
        }
        if out_cap < len {
            return fail(JfStatus::BufferTooSmall, format!("need {len} slots, got {out_cap}"));
        }
        let chunk = match detokenize_chunk(std::slice::from_raw_parts(tokens, len), &m.task.discretizer) {
            Ok(c) => c,
            Err(e) => return from_core(e),
        };
        let dst = std::slice::from_raw_parts_mut(out, len);
        for (d, v) in dst.iter_mut().zip(chunk.flat()) {
            *d = v;
        }
        JfStatus::Ok
    })
}
