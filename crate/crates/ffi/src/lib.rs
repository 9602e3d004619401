//! C ABI over the critalign library: load a checkpoint into an opaque
//! session handle, then classify, score, and rank stories, plus the
//! standalone quote-masking and anonymization passes.
//!
//! Conventions: every function returns a [`CritalignStatus`]; outputs are
//! written through out-pointers. Strings returned by this library are
//! NUL-terminated, allocated by Rust, and must be released with
//! [`critalign_string_free`]. Sessions are not thread-safe; callers must
//! serialize access to one handle. On any non-OK status a human-readable
//! message is available via [`critalign_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use critalign::error::Error;
use critalign::model::{Checkpoint, DualEncoder};
use critalign::pipeline::{self, HeuristicRecognizer};
use critalign::tokenizer::Vocabulary;
use critalign::zeroshot::{self, ClassifierSpec, StoryScorer};

/// Result codes for every FFI entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CritalignStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// An input string was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Bad data: unreadable files, malformed JSON, unknown presets.
    DataError = 3,
    /// Numeric failure inside the model (shape mismatch, non-finite values,
    /// degenerate inputs).
    NumericError = 4,
    /// An internal panic was caught at the boundary.
    InternalError = 5,
}

/// Opaque handle: a loaded model plus its vocabulary.
pub struct CritalignSession {
    model: DualEncoder,
    vocab: Vocabulary,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).ok();
    });
}

fn status_of(err: &Error) -> CritalignStatus {
    if err.is_numeric() {
        CritalignStatus::NumericError
    } else {
        CritalignStatus::DataError
    }
}

fn fail(err: &Error) -> CritalignStatus {
    set_last_error(&err.to_string());
    status_of(err)
}

/// Run a fallible body with panic containment.
fn guarded(body: impl FnOnce() -> CritalignStatus) -> CritalignStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_last_error("internal panic");
            CritalignStatus::InternalError
        }
    }
}

/// # Safety
/// `ptr` must be NULL or a NUL-terminated string valid for reads.
unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, CritalignStatus> {
    if ptr.is_null() {
        set_last_error("required string argument is NULL");
        return Err(CritalignStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_last_error("string argument is not valid UTF-8");
        CritalignStatus::InvalidUtf8
    })
}

fn give_string(out: *mut *mut c_char, text: String) -> CritalignStatus {
    match CString::new(text.replace('\0', " ")) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            CritalignStatus::Ok
        }
        Err(_) => {
            set_last_error("output contained an interior NUL");
            CritalignStatus::InternalError
        }
    }
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn critalign_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Most recent error message on this thread, or NULL if none. The caller
/// owns the returned string and must free it with `critalign_string_free`.
#[no_mangle]
pub extern "C" fn critalign_last_error() -> *mut c_char {
    LAST_ERROR.with(|slot| match slot.borrow().as_ref() {
        Some(msg) => msg.clone().into_raw(),
        None => ptr::null_mut(),
    })
}

/// Release a string allocated by this library.
///
/// # Safety
/// `s` must be NULL or a pointer previously returned by a critalign
/// function, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn critalign_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load a checkpoint file into a new session. On success writes the handle
/// to `out_session`; release it with `critalign_session_close`.
///
/// # Safety
/// `checkpoint_path` must be a valid NUL-terminated string and
/// `out_session` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn critalign_session_open(
    checkpoint_path: *const c_char,
    out_session: *mut *mut CritalignSession,
) -> CritalignStatus {
    guarded(|| {
        if out_session.is_null() {
            set_last_error("out_session is NULL");
            return CritalignStatus::NullArgument;
        }
        let path = match read_str(checkpoint_path) {
            Ok(s) => s,
            Err(status) => return status,
        };
        match Checkpoint::load(Path::new(path)).and_then(|ck| ck.restore()) {
            Ok((model, vocab)) => {
                let session = Box::new(CritalignSession { model, vocab });
                *out_session = Box::into_raw(session);
                CritalignStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Destroy a session created by `critalign_session_open`.
///
/// # Safety
/// `session` must be NULL or an open session handle, not yet closed.
#[no_mangle]
pub unsafe extern "C" fn critalign_session_close(session: *mut CritalignSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Number of tokens in the session's vocabulary.
///
/// # Safety
/// `session` must be an open session handle; `out_size` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn critalign_session_vocab_size(
    session: *const CritalignSession,
    out_size: *mut usize,
) -> CritalignStatus {
    guarded(|| {
        if session.is_null() || out_size.is_null() {
            set_last_error("session or out_size is NULL");
            return CritalignStatus::NullArgument;
        }
        *out_size = (*session).vocab.len();
        CritalignStatus::Ok
    })
}

unsafe fn session_specs(
    specs_json: *const c_char,
) -> Result<Vec<ClassifierSpec>, CritalignStatus> {
    if specs_json.is_null() {
        return zeroshot::load_preset("nine-reviews").map_err(|e| fail(&e));
    }
    let text = read_str(specs_json)?;
    let specs: Vec<ClassifierSpec> = serde_json::from_str(text).map_err(|e| {
        set_last_error(&format!("classifier specs: {}", e));
        CritalignStatus::DataError
    })?;
    for s in &specs {
        s.validate().map_err(|e| fail(&e))?;
    }
    Ok(specs)
}

/// Zero-shot classification. `specs_json` is a JSON list of
/// `{"label": ..., "variants": [...]}`; pass NULL for the nine-review
/// preset. Writes `{"labels": [...], "probabilities": [...]}` to
/// `out_json`.
///
/// # Safety
/// `session` must be an open session handle; `story` a valid string;
/// `specs_json` NULL or a valid string; `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn critalign_classify(
    session: *const CritalignSession,
    story: *const c_char,
    specs_json: *const c_char,
    out_json: *mut *mut c_char,
) -> CritalignStatus {
    guarded(|| {
        if session.is_null() || out_json.is_null() {
            set_last_error("session or out_json is NULL");
            return CritalignStatus::NullArgument;
        }
        let story = match read_str(story) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let specs = match session_specs(specs_json) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let s = &*session;
        let scorer = StoryScorer::new(&s.model, &s.vocab);
        match scorer.classify(story, &specs).and_then(|d| Ok(serde_json::to_string(&d)?)) {
            Ok(json) => give_string(out_json, json),
            Err(e) => fail(&e),
        }
    })
}

/// Mean-cosine score of one classifier spec (`{"label":..,"variants":[..]}`)
/// against a story.
///
/// # Safety
/// `session` must be an open session handle; `story` and `spec_json` valid
/// strings; `out_score` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn critalign_score(
    session: *const CritalignSession,
    story: *const c_char,
    spec_json: *const c_char,
    out_score: *mut f64,
) -> CritalignStatus {
    guarded(|| {
        if session.is_null() || out_score.is_null() {
            set_last_error("session or out_score is NULL");
            return CritalignStatus::NullArgument;
        }
        let story = match read_str(story) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let spec_text = match read_str(spec_json) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let spec: ClassifierSpec = match serde_json::from_str(spec_text) {
            Ok(s) => s,
            Err(e) => {
                set_last_error(&format!("classifier spec: {}", e));
                return CritalignStatus::DataError;
            }
        };
        let s = &*session;
        let scorer = StoryScorer::new(&s.model, &s.vocab);
        match scorer.score(story, &spec) {
            Ok(v) => {
                *out_score = v;
                CritalignStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Rank candidate reviews (JSON array of strings) by similarity to the
/// story. Writes a JSON array of `{"review":..., "cosine":...}` in
/// descending order.
///
/// # Safety
/// `session` must be an open session handle; `story` and `candidates_json`
/// valid strings; `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn critalign_rank(
    session: *const CritalignSession,
    story: *const c_char,
    candidates_json: *const c_char,
    out_json: *mut *mut c_char,
) -> CritalignStatus {
    guarded(|| {
        if session.is_null() || out_json.is_null() {
            set_last_error("session or out_json is NULL");
            return CritalignStatus::NullArgument;
        }
        let story = match read_str(story) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let cand_text = match read_str(candidates_json) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let candidates: Vec<String> = match serde_json::from_str(cand_text) {
            Ok(c) => c,
            Err(e) => {
                set_last_error(&format!("candidates: {}", e));
                return CritalignStatus::DataError;
            }
        };
        let s = &*session;
        let scorer = StoryScorer::new(&s.model, &s.vocab);
        let ranked = match scorer.rank_reviews(story, &candidates) {
            Ok(r) => r,
            Err(e) => return fail(&e),
        };
        let rows: Vec<serde_json::Value> = ranked
            .into_iter()
            .map(|(review, cosine)| serde_json::json!({ "review": review, "cosine": cosine }))
            .collect();
        match serde_json::to_string(&rows) {
            Ok(json) => give_string(out_json, json),
            Err(e) => fail(&Error::from(e)),
        }
    })
}

/// Replace story text quoted inside a critique with `[quote]` tokens.
/// Sessions are not needed; this is the standalone preprocessing pass.
///
/// # Safety
/// `passage` and `critique` must be valid strings; `out_masked` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn critalign_mask_quotes(
    passage: *const c_char,
    critique: *const c_char,
    threshold: usize,
    out_masked: *mut *mut c_char,
) -> CritalignStatus {
    guarded(|| {
        if out_masked.is_null() {
            set_last_error("out_masked is NULL");
            return CritalignStatus::NullArgument;
        }
        let passage = match read_str(passage) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let critique = match read_str(critique) {
            Ok(s) => s,
            Err(status) => return status,
        };
        match pipeline::mask_quotes(passage, critique, threshold) {
            Ok(masked) => give_string(out_masked, masked),
            Err(e) => fail(&e),
        }
    })
}

/// Anonymize a (passage, critique) record with the built-in heuristic
/// recognizer and default name pool; the pair shares one entity map.
///
/// # Safety
/// `passage` and `critique` must be valid strings; `out_passage` and
/// `out_critique` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn critalign_anonymize_pair(
    passage: *const c_char,
    critique: *const c_char,
    out_passage: *mut *mut c_char,
    out_critique: *mut *mut c_char,
) -> CritalignStatus {
    guarded(|| {
        if out_passage.is_null() || out_critique.is_null() {
            set_last_error("out_passage or out_critique is NULL");
            return CritalignStatus::NullArgument;
        }
        let passage = match read_str(passage) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let critique = match read_str(critique) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let recognizer = HeuristicRecognizer::new();
        let pool = pipeline::default_name_pool();
        match pipeline::anonymize_pair(passage, critique, &recognizer, &pool) {
            Ok((p, c)) => {
                let status = give_string(out_passage, p);
                if status != CritalignStatus::Ok {
                    return status;
                }
                let status = give_string(out_critique, c);
                if status != CritalignStatus::Ok {
                    critalign_string_free(*out_passage);
                    *out_passage = ptr::null_mut();
                }
                status
            }
            Err(e) => fail(&e),
        }
    })
}
