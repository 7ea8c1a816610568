//! C ABI over the likefilter primitives: tokenization, the strict threshold
//! rule, blocklist matching and scoring with a trained reference model.
//!
//! Every fallible call returns an [`LfStatus`]. On failure a description is
//! available from [`lf_last_error_message`] on the same thread. Strings
//! handed out through `char **` parameters must be released with
//! [`lf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use likefilter::blocklist::{load_blocklist, Blocklist};
use likefilter::corpus::Document;
use likefilter::filter::TriggerPhrase;
use likefilter::lm::{score_trigger, NGramModel, ReferenceBackend};
use likefilter::tokenizer::tokenize;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LfStatus {
    LfOk = 0,
    LfNullArgument = 1,
    LfInvalidUtf8 = 2,
    LfInvalidArgument = 3,
    LfIo = 4,
    LfInternal = 5,
}

/// Opaque blocklist handle.
pub struct LfBlocklist(Blocklist);

/// Opaque handle to a reference n-gram model.
pub struct LfModel(ReferenceBackend);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let message = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(message).unwrap_or_default());
}

struct Failure(LfStatus, String);

type FfiResult<T> = Result<T, Failure>;

fn fail<T>(status: LfStatus, message: impl Into<String>) -> FfiResult<T> {
    Err(Failure(status, message.into()))
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> LfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LfStatus::LfOk
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal error (panic)");
            LfStatus::LfInternal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(LfStatus::LfNullArgument, format!("{name} is NULL"));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(s),
        Err(_) => fail(LfStatus::LfInvalidUtf8, format!("{name} is not valid UTF-8")),
    }
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<Option<&'a str>> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

fn out_arg<T>(p: *mut T, name: &str) -> FfiResult<()> {
    if p.is_null() {
        fail(LfStatus::LfNullArgument, format!("{name} is NULL"))
    } else {
        Ok(())
    }
}

fn into_c_string(s: String) -> FfiResult<*mut c_char> {
    CString::new(s).map(CString::into_raw).or_else(|_| fail(LfStatus::LfInternal, "string contains NUL"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn lf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Frees a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn lf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Tokenizes `text` and writes a JSON array of tokens to `*out_json`.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lf_tokenize_json(text: *const c_char, out_json: *mut *mut c_char) -> LfStatus {
    guard(|| {
        out_arg(out_json, "out_json")?;
        let text = str_arg(text, "text")?;
        let json = serde_json::to_string(&tokenize(text)).or_else(|e| fail(LfStatus::LfInternal, e.to_string()))?;
        *out_json = into_c_string(json)?;
        Ok(())
    })
}

/// 1 if a document with max score `score` is removed at threshold `theta`
/// (strictly greater), 0 if retained, -1 if either value is not finite.
#[no_mangle]
pub extern "C" fn lf_threshold_removes(score: f64, theta: f64) -> c_int {
    if !score.is_finite() || !theta.is_finite() {
        set_error("score and threshold must be finite");
        return -1;
    }
    c_int::from(score > theta)
}

/// Loads a blocklist file and an optional allowlist file (NULL for none).
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lf_blocklist_load(
    entries_path: *const c_char,
    allowlist_path: *const c_char,
    out: *mut *mut LfBlocklist,
) -> LfStatus {
    guard(|| {
        out_arg(out, "out")?;
        let entries = str_arg(entries_path, "entries_path")?;
        let allow = opt_str_arg(allowlist_path, "allowlist_path")?;
        let bl = load_blocklist(Path::new(entries), allow.map(Path::new)).or_else(|e| fail(LfStatus::LfIo, e.to_string()))?;
        *out = Box::into_raw(Box::new(LfBlocklist(bl)));
        Ok(())
    })
}

/// Builds a blocklist from in-memory file contents (one word per line).
///
/// # Safety
/// `entries` must be a NUL-terminated string, `allowlist` NULL or one;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lf_blocklist_from_text(
    entries: *const c_char,
    allowlist: *const c_char,
    out: *mut *mut LfBlocklist,
) -> LfStatus {
    guard(|| {
        out_arg(out, "out")?;
        let entries = str_arg(entries, "entries")?;
        let allow = opt_str_arg(allowlist, "allowlist")?;
        *out = Box::into_raw(Box::new(LfBlocklist(Blocklist::from_lines(entries, allow, "ffi"))));
        Ok(())
    })
}

/// Sets `*out_matched` to 1 and `*out_word` to the first blocklisted token of
/// `text`, or to 0 and NULL when nothing matches.
///
/// # Safety
/// `blocklist` must be a live handle; `text` a NUL-terminated string;
/// `out_word` and `out_matched` writable.
#[no_mangle]
pub unsafe extern "C" fn lf_blocklist_match(
    blocklist: *const LfBlocklist,
    text: *const c_char,
    out_word: *mut *mut c_char,
    out_matched: *mut c_int,
) -> LfStatus {
    guard(|| {
        out_arg(out_word, "out_word")?;
        out_arg(out_matched, "out_matched")?;
        let Some(bl) = blocklist.as_ref() else { return fail(LfStatus::LfNullArgument, "blocklist is NULL") };
        let text = str_arg(text, "text")?;
        match bl.0.match_document(&Document::new("ffi", text)) {
            Some(hit) => {
                *out_word = into_c_string(hit.word)?;
                *out_matched = 1;
            }
            None => {
                *out_word = ptr::null_mut();
                *out_matched = 0;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `blocklist` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lf_blocklist_free(blocklist: *mut LfBlocklist) {
    if !blocklist.is_null() {
        drop(Box::from_raw(blocklist));
    }
}

/// Loads a reference model written by `likefilter train-ref`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lf_model_load(path: *const c_char, out: *mut *mut LfModel) -> LfStatus {
    guard(|| {
        out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let model = NGramModel::load(Path::new(path)).or_else(|e| fail(LfStatus::LfIo, e.to_string()))?;
        *out = Box::into_raw(Box::new(LfModel(ReferenceBackend::new(model))));
        Ok(())
    })
}

/// Mean per-token log-probability (nats) of `trigger` given the start of
/// `document`, with the excerpt truncated so both fit in `budget` tokens.
///
/// # Safety
/// `model` must be a live handle; strings NUL-terminated; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn lf_model_score_trigger(
    model: *const LfModel,
    document: *const c_char,
    trigger: *const c_char,
    budget: usize,
    out_mean: *mut f64,
    out_tokens: *mut usize,
) -> LfStatus {
    guard(|| {
        out_arg(out_mean, "out_mean")?;
        out_arg(out_tokens, "out_tokens")?;
        let Some(model) = model.as_ref() else { return fail(LfStatus::LfNullArgument, "model is NULL") };
        let document = str_arg(document, "document")?;
        let trigger = str_arg(trigger, "trigger")?;
        let record = score_trigger(&model.0, &Document::new("ffi", document), &TriggerPhrase::new("ffi", trigger), budget)
            .or_else(|e| fail(LfStatus::LfInvalidArgument, e.to_string()))?;
        *out_mean = record.mean_logprob;
        *out_tokens = record.token_count;
        Ok(())
    })
}

/// Vocabulary size including the unknown-token entry; 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lf_model_vocab_size(model: *const LfModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.model().vocab().len())
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lf_model_free(model: *mut LfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
