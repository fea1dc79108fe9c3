//! C ABI over the trained artifacts: load a classifier or language-model
//! checkpoint from its directory, classify sentences, generate
//! continuations. Handles are opaque; every call returns a status code and
//! the last error message is kept per thread.
//!
//! The header `include/normgen.h` is regenerated by the build script.

use normgen::classifier::ClassifierModel;
use normgen::corpus::{detokenize, tokenize};
use normgen::lm::{LmModel, Sampling};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NgStatus {
    NgOk = 0,
    /// A required pointer argument was null.
    NgNullArgument = 1,
    /// A string argument was not valid UTF-8.
    NgInvalidUtf8 = 2,
    /// Checkpoint could not be read or parsed.
    NgLoadFailed = 3,
    /// Input rejected by the model (empty, unknown tokens, bad shape).
    NgInvalidInput = 4,
    /// Any other internal failure.
    NgInternal = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(clean).unwrap_or_else(|_| CString::new("error").unwrap());
    });
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread. Never null.
#[no_mangle]
pub extern "C" fn ng_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Opaque classifier handle.
pub struct NgClassifier {
    model: ClassifierModel,
}

/// Opaque language-model handle.
pub struct NgLm {
    model: LmModel,
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, NgStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(NgStatus::NgNullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        NgStatus::NgInvalidUtf8
    })
}

/// Load a classifier checkpoint directory. On success writes a handle to
/// `out`; release it with `ng_classifier_free`.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ng_classifier_load(
    dir: *const c_char,
    out: *mut *mut NgClassifier,
) -> NgStatus {
    if out.is_null() {
        set_error("null output pointer");
        return NgStatus::NgNullArgument;
    }
    let dir = match cstr_arg(dir) {
        Ok(s) => s,
        Err(st) => return st,
    };
    match ClassifierModel::load(Path::new(dir)) {
        Ok((model, _warnings)) => {
            *out = Box::into_raw(Box::new(NgClassifier { model }));
            NgStatus::NgOk
        }
        Err(e) => {
            set_error(&e.to_string());
            NgStatus::NgLoadFailed
        }
    }
}

/// Classify a sentence. Writes the acceptability probability and the
/// thresholded label (1 = acceptable, 0 = flagged).
///
/// # Safety
/// `handle` must come from `ng_classifier_load`; `text` must be a valid
/// NUL-terminated string; `probability` and `label` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ng_classifier_classify(
    handle: *const NgClassifier,
    text: *const c_char,
    probability: *mut f64,
    label: *mut u8,
) -> NgStatus {
    if handle.is_null() || probability.is_null() || label.is_null() {
        set_error("null argument");
        return NgStatus::NgNullArgument;
    }
    let text = match cstr_arg(text) {
        Ok(s) => s,
        Err(st) => return st,
    };
    match (*handle).model.classify_text(text) {
        Ok(j) => {
            *probability = j.probability;
            *label = j.label;
            NgStatus::NgOk
        }
        Err(e) => {
            set_error(&e.to_string());
            NgStatus::NgInvalidInput
        }
    }
}

/// # Safety
/// `handle` must come from `ng_classifier_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ng_classifier_free(handle: *mut NgClassifier) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Load a language-model checkpoint directory. Release the handle with
/// `ng_lm_free`.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ng_lm_load(dir: *const c_char, out: *mut *mut NgLm) -> NgStatus {
    if out.is_null() {
        set_error("null output pointer");
        return NgStatus::NgNullArgument;
    }
    let dir = match cstr_arg(dir) {
        Ok(s) => s,
        Err(st) => return st,
    };
    match LmModel::load(Path::new(dir)) {
        Ok((model, _warnings)) => {
            *out = Box::into_raw(Box::new(NgLm { model }));
            NgStatus::NgOk
        }
        Err(e) => {
            set_error(&e.to_string());
            NgStatus::NgLoadFailed
        }
    }
}

/// Sample a continuation of `prompt`. Writes a heap-allocated string to
/// `out_text`; release it with `ng_string_free`. Deterministic in `seed`.
///
/// # Safety
/// `handle` must come from `ng_lm_load`; `prompt` must be a valid
/// NUL-terminated string; `out_text` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ng_lm_generate(
    handle: *const NgLm,
    prompt: *const c_char,
    max_new: usize,
    temperature: f64,
    top_k: usize,
    seed: u64,
    out_text: *mut *mut c_char,
) -> NgStatus {
    if handle.is_null() || out_text.is_null() {
        set_error("null argument");
        return NgStatus::NgNullArgument;
    }
    let prompt = match cstr_arg(prompt) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let model = &(*handle).model;
    let ids = tokenize(prompt, &model.vocab);
    let sampling = Sampling { temperature, top_k };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rec = match model.sample_continuation(&ids, max_new, &sampling, &mut rng) {
        Ok(r) => r,
        Err(e) => {
            set_error(&e.to_string());
            return NgStatus::NgInvalidInput;
        }
    };
    let text = match detokenize(&rec.continuation, &model.vocab) {
        Ok(t) => t,
        Err(e) => {
            set_error(&e.to_string());
            return NgStatus::NgInternal;
        }
    };
    match CString::new(text) {
        Ok(c) => {
            *out_text = c.into_raw();
            NgStatus::NgOk
        }
        Err(_) => {
            set_error("generated text contained NUL");
            NgStatus::NgInternal
        }
    }
}

/// Free a string returned by `ng_lm_generate`.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ng_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `handle` must come from `ng_lm_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ng_lm_free(handle: *mut NgLm) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}
