//! C ABI over `vsc-engine`.
//!
//! Every function returns a [`VscStatus`]. On failure a message is kept per
//! thread and read with [`vsc_last_error`]. Strings handed out by the
//! library are freed with [`vsc_string_free`]; scorers with
//! [`vsc_scorer_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use thiserror::Error;
use vsc_engine::doc::Document;
use vsc_engine::fixtures::page_supervision;
use vsc_engine::reward::{load_gold_file, Decision, RewardWeights, Scorer};
use vsc_engine::supervision::{total_loss, GridMap, SupervisionError};
use vsc_engine::vsc::RolloutRecord;

/// Result of every call. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VscStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidJson = 3,
    InvalidDocument = 4,
    InvalidGold = 5,
    InvalidArgument = 6,
    /// The record was read but could not be scored; the output still holds
    /// the error object.
    RecordError = 7,
    BufferTooSmall = 8,
    ShapeMismatch = 9,
    Panic = 10,
}

/// Composite reward weights.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VscWeights {
    pub lambda_q: f64,
    pub lambda_v: f64,
    pub lambda_s: f64,
    pub lambda_r: f64,
}

/// Layout loss terms: `total = kl + lambda_c * center`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VscLoss {
    pub kl: f64,
    pub center: f64,
    pub total: f64,
}

/// Opaque scorer over a fixed document set and gold file.
pub struct VscScorer {
    inner: Scorer,
}

#[derive(Debug, Error)]
enum FfiError {
    #[error("argument `{0}` is null")]
    Null(&'static str),
    #[error("argument `{0}` is not valid UTF-8")]
    Utf8(&'static str),
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("invalid document: {0}")]
    Document(String),
    #[error("invalid gold file: {0}")]
    Gold(String),
    #[error("{0}")]
    Argument(String),
    #[error("{0}")]
    Record(String),
    #[error("buffer holds {have} values, {need} needed")]
    Buffer { have: usize, need: usize },
    #[error("{0}")]
    Shape(String),
}

impl FfiError {
    fn status(&self) -> VscStatus {
        match self {
            FfiError::Null(_) => VscStatus::NullArgument,
            FfiError::Utf8(_) => VscStatus::InvalidUtf8,
            FfiError::Json(_) => VscStatus::InvalidJson,
            FfiError::Document(_) => VscStatus::InvalidDocument,
            FfiError::Gold(_) => VscStatus::InvalidGold,
            FfiError::Argument(_) => VscStatus::InvalidArgument,
            FfiError::Record(_) => VscStatus::RecordError,
            FfiError::Buffer { .. } => VscStatus::BufferTooSmall,
            FfiError::Shape(_) => VscStatus::ShapeMismatch,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), FfiError>) -> VscStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            VscStatus::Ok
        }
        Ok(Err(e)) => {
            set_last_error(&e.to_string());
            e.status()
        }
        Err(_) => {
            set_last_error("internal panic");
            VscStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, FfiError> {
    if p.is_null() {
        return Err(FfiError::Null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| FfiError::Utf8(name))
}

fn supervision_error(e: SupervisionError) -> FfiError {
    match e {
        SupervisionError::ShapeMismatch(_) => FfiError::Shape(e.to_string()),
        _ => FfiError::Argument(e.to_string()),
    }
}

fn out_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

fn parse_documents(json: &str) -> Result<Vec<Document>, FfiError> {
    let v: serde_json::Value = serde_json::from_str(json).map_err(|e| FfiError::Json(e.to_string()))?;
    let items = match v {
        serde_json::Value::Array(items) => items,
        single => vec![single],
    };
    items
        .iter()
        .map(|d| Document::from_json(d.to_string().as_bytes()).map_err(|e| FfiError::Document(e.to_string())))
        .collect()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vsc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn vsc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn vsc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a scorer.
///
/// `docs_json` is one document object or an array of them; `gold_jsonl`
/// holds one gold line per question. `weights` may be null for the
/// defaults. `tau` overrides every gold threshold when in `[0, 1]`; pass a
/// negative value to keep each record's own.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vsc_scorer_new(
    docs_json: *const c_char,
    gold_jsonl: *const c_char,
    weights: *const VscWeights,
    gated: bool,
    tau: f64,
    out: *mut *mut VscScorer,
) -> VscStatus {
    guard(|| {
        if out.is_null() {
            return Err(FfiError::Null("out"));
        }
        *out = ptr::null_mut();
        let docs = parse_documents(text(docs_json, "docs_json")?)?;
        let gold = load_gold_file(text(gold_jsonl, "gold_jsonl")?.as_bytes()).map_err(FfiError::Gold)?;
        let weights = match weights.as_ref() {
            None => RewardWeights::default(),
            Some(w) => {
                let w = RewardWeights {
                    lambda_q: w.lambda_q,
                    lambda_v: w.lambda_v,
                    lambda_s: w.lambda_s,
                    lambda_r: w.lambda_r,
                };
                let all = [w.lambda_q, w.lambda_v, w.lambda_s, w.lambda_r];
                if !all.iter().all(|x| x.is_finite() && *x >= 0.0) {
                    return Err(FfiError::Argument(format!("weights must be non-negative and finite, got {w}")));
                }
                w
            }
        };
        let mut scorer = Scorer::new(docs, gold, weights, gated);
        if tau >= 0.0 {
            if tau > 1.0 || tau.is_nan() {
                return Err(FfiError::Argument(format!("tau must lie in [0, 1], got {tau}")));
            }
            scorer.tau = Some(tau);
        }
        *out = Box::into_raw(Box::new(VscScorer { inner: scorer }));
        Ok(())
    })
}

/// Frees a scorer. Null is ignored.
///
/// # Safety
/// `scorer` must come from [`vsc_scorer_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn vsc_scorer_free(scorer: *mut VscScorer) {
    if !scorer.is_null() {
        drop(Box::from_raw(scorer));
    }
}

/// Scores one rollout line and writes the breakdown JSON (the same object
/// the `score` command prints) to `out`. When the record cannot be scored
/// the status is `RECORD_ERROR` and `out` holds the error object.
///
/// # Safety
/// `scorer` must be live; `line` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vsc_scorer_score(
    scorer: *const VscScorer,
    line: *const c_char,
    out: *mut *mut c_char,
) -> VscStatus {
    guard(|| {
        if out.is_null() {
            return Err(FfiError::Null("out"));
        }
        *out = ptr::null_mut();
        let s = scorer.as_ref().ok_or(FfiError::Null("scorer"))?;
        let v = s.inner.score_line(text(line, "line")?);
        *out = out_string(v.to_string());
        match v.get("message").and_then(|m| m.as_str()) {
            Some(msg) if v.get("error").is_some() => Err(FfiError::Record(msg.to_string())),
            _ => Ok(()),
        }
    })
}

/// Runs the rejection filter on one rollout line; `retain` is set to
/// whether it is kept.
///
/// # Safety
/// `scorer` must be live; `line` NUL-terminated; `retain` writable.
#[no_mangle]
pub unsafe extern "C" fn vsc_scorer_filter(
    scorer: *const VscScorer,
    line: *const c_char,
    retain: *mut bool,
) -> VscStatus {
    guard(|| {
        let retain = retain.as_mut().ok_or(FfiError::Null("retain"))?;
        let s = scorer.as_ref().ok_or(FfiError::Null("scorer"))?;
        let rec = RolloutRecord::from_json_line(text(line, "line")?).map_err(|e| FfiError::Record(e.to_string()))?;
        let decision = s.inner.filter(&rec).map_err(|e| FfiError::Record(e.to_string()))?;
        *retain = matches!(decision, Decision::Retain);
        Ok(())
    })
}

/// Builds the `h`×`w` supervision map of a document's OCR line boxes into
/// `out` (row-major, `len >= h * w`).
///
/// # Safety
/// `doc_json` must be NUL-terminated; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vsc_supervision_map(
    doc_json: *const c_char,
    h: usize,
    w: usize,
    out: *mut f64,
    len: usize,
) -> VscStatus {
    guard(|| {
        if out.is_null() {
            return Err(FfiError::Null("out"));
        }
        if h == 0 || w == 0 {
            return Err(FfiError::Argument(format!("grid must be at least 1x1, got {h}x{w}")));
        }
        let need = h.checked_mul(w).ok_or_else(|| FfiError::Argument("grid too large".into()))?;
        if len < need {
            return Err(FfiError::Buffer { have: len, need });
        }
        let doc = Document::from_json(text(doc_json, "doc_json")?.as_bytes())
            .map_err(|e| FfiError::Document(e.to_string()))?;
        let m = page_supervision(&doc, h, w);
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(&m.values);
        Ok(())
    })
}

/// Layout loss of a predicted map `p` against a target `y`, both `h`×`w`
/// row-major distributions.
///
/// # Safety
/// `y` and `p` must hold `h * w` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vsc_layout_loss(
    y: *const f64,
    p: *const f64,
    h: usize,
    w: usize,
    lambda_c: f64,
    out: *mut VscLoss,
) -> VscStatus {
    guard(|| {
        let out = out.as_mut().ok_or(FfiError::Null("out"))?;
        if y.is_null() || p.is_null() {
            return Err(FfiError::Null(if y.is_null() { "y" } else { "p" }));
        }
        let n = h.checked_mul(w).ok_or_else(|| FfiError::Argument("grid too large".into()))?;
        let map = |ptr: *const f64| {
            GridMap::new(h, w, std::slice::from_raw_parts(ptr, n).to_vec()).map_err(supervision_error)
        };
        let r = total_loss(&map(y)?, &map(p)?, lambda_c).map_err(supervision_error)?;
        *out = VscLoss { kl: r.kl, center: r.center, total: r.total };
        Ok(())
    })
}
