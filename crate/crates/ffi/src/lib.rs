//! C ABI for the ctcat detector.
//!
//! Every call returns a [`CtcatStatus`]; on failure a description is kept per
//! thread and can be fetched with [`ctcat_last_error_message`]. Detectors are
//! opaque heap objects created by a `ctcat_detector_new*` call and released
//! with [`ctcat_detector_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use ctcat::pipeline::{load_detector, PipelineError};
use ctcat::{enroll, DetectError, Detector, EnrollmentFileError, Level, Vocabulary};

/// Character-level similarity groups.
pub const CTCAT_LEVEL_CHARACTER: u32 = 0;
/// Word-level similarity groups.
pub const CTCAT_LEVEL_WORD: u32 = 1;
/// One group for the whole keyword.
pub const CTCAT_LEVEL_PHRASE: u32 = 2;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtcatStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Vocabulary = 5,
    DimensionMismatch = 6,
    Panic = 7,
}

/// Score of one frame.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CtcatScore {
    pub t: u64,
    pub z_ctc: f64,
    pub z_embed: f64,
    pub z: f64,
    pub valid: bool,
}

/// Opaque detector handle.
pub struct CtcatDetector {
    inner: Detector,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn fail(status: CtcatStatus, msg: impl Into<String>) -> CtcatStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> CtcatStatus) -> CtcatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == CtcatStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(CtcatStatus::Panic, "internal panic"),
    }
}

fn enrollment_status(e: &EnrollmentFileError) -> CtcatStatus {
    match e {
        EnrollmentFileError::Io(_) => CtcatStatus::Io,
        EnrollmentFileError::Json(_)
        | EnrollmentFileError::BadFormat(_)
        | EnrollmentFileError::BadVersion(_)
        | EnrollmentFileError::TeParse { .. } => CtcatStatus::Format,
        EnrollmentFileError::VocabularyMismatch { .. } | EnrollmentFileError::Vocab(_) => CtcatStatus::Vocabulary,
        EnrollmentFileError::TokenCountMismatch { .. } | EnrollmentFileError::DimMismatch { .. } => CtcatStatus::DimensionMismatch,
        EnrollmentFileError::Score(_) => CtcatStatus::InvalidArgument,
    }
}

fn pipeline_status(e: &PipelineError) -> CtcatStatus {
    match e.root() {
        PipelineError::Enrollment(e) => enrollment_status(e),
        PipelineError::Io(_) => CtcatStatus::Io,
        PipelineError::HeaderMismatch { .. } | PipelineError::DimensionMismatch { .. } => CtcatStatus::DimensionMismatch,
        PipelineError::Format(_) | PipelineError::Csv(_) => CtcatStatus::Format,
        _ => CtcatStatus::InvalidArgument,
    }
}

fn level_from(code: u32) -> Option<Level> {
    match code {
        CTCAT_LEVEL_CHARACTER => Some(Level::Character),
        CTCAT_LEVEL_WORD => Some(Level::Word),
        CTCAT_LEVEL_PHRASE => Some(Level::Phrase),
        _ => None,
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, CtcatStatus> {
    if p.is_null() {
        return Err(fail(CtcatStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(CtcatStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

/// Creates a detector from an enrollment document on disk.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ctcat_detector_new_from_enrollment(path: *const c_char, out: *mut *mut CtcatDetector) -> CtcatStatus {
    guard(|| {
        if out.is_null() {
            return fail(CtcatStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_detector(&Vocabulary::english(), Path::new(path), false) {
            Ok(d) => {
                *out = Box::into_raw(Box::new(CtcatDetector { inner: d }));
                CtcatStatus::Ok
            }
            Err(e) => fail(pipeline_status(&e), e.to_string()),
        }
    })
}

/// Creates a detector for `text` with `u` token embeddings of dimension `d`,
/// laid out row-major in `te` (`u * d` doubles). `level` is one of the
/// `CTCAT_LEVEL_*` constants.
///
/// # Safety
/// `text` must be NUL-terminated, `te` must point to `u * d` doubles and
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ctcat_detector_new(
    text: *const c_char,
    level: u32,
    lambda: f64,
    te: *const f64,
    u: usize,
    d: usize,
    out: *mut *mut CtcatDetector,
) -> CtcatStatus {
    guard(|| {
        if out.is_null() {
            return fail(CtcatStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let text = match str_arg(text, "text") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let Some(level) = level_from(level) else {
            return fail(CtcatStatus::InvalidArgument, format!("unknown level {level}"));
        };
        if te.is_null() {
            return fail(CtcatStatus::NullPointer, "te is null");
        }
        let Some(n) = u.checked_mul(d) else {
            return fail(CtcatStatus::InvalidArgument, "u * d overflows");
        };
        let rows: Vec<Vec<f64>> = if d == 0 {
            vec![Vec::new(); u]
        } else {
            slice::from_raw_parts(te, n).chunks(d).map(<[f64]>::to_vec).collect()
        };
        let vocab = Vocabulary::english();
        let enrollment = match enroll(&vocab, text, rows, level, lambda, Default::default()) {
            Ok((e, _)) => e,
            Err(e) => return fail(enrollment_status(&e), e.to_string()),
        };
        match Detector::new(&vocab, enrollment) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(CtcatDetector { inner }));
                CtcatStatus::Ok
            }
            Err(e) => fail(CtcatStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Pushes one frame: `v` log-posteriors and a `d`-dimensional embedding.
///
/// # Safety
/// `det` must come from a `ctcat_detector_new*` call; `log_posteriors` and
/// `embedding` must point to `v` and `d` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ctcat_detector_step(
    det: *mut CtcatDetector,
    log_posteriors: *const f64,
    v: usize,
    embedding: *const f64,
    d: usize,
    out: *mut CtcatScore,
) -> CtcatStatus {
    guard(|| {
        if det.is_null() || log_posteriors.is_null() || embedding.is_null() || out.is_null() {
            return fail(CtcatStatus::NullPointer, "null argument");
        }
        let det = &mut (*det).inner;
        let lp = slice::from_raw_parts(log_posteriors, v);
        let emb = slice::from_raw_parts(embedding, d);
        match det.push(lp, emb) {
            Ok(s) => {
                *out = CtcatScore {
                    t: s.t,
                    z_ctc: s.z_ctc,
                    z_embed: s.z_embed,
                    z: s.z,
                    valid: s.valid,
                };
                CtcatStatus::Ok
            }
            Err(e @ DetectError::Align(_)) => fail(CtcatStatus::DimensionMismatch, e.to_string()),
            Err(e) => fail(CtcatStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Forgets all frames seen so far.
///
/// # Safety
/// `det` must come from a `ctcat_detector_new*` call.
#[no_mangle]
pub unsafe extern "C" fn ctcat_detector_reset(det: *mut CtcatDetector) -> CtcatStatus {
    guard(|| {
        if det.is_null() {
            return fail(CtcatStatus::NullPointer, "detector is null");
        }
        (*det).inner.reset();
        CtcatStatus::Ok
    })
}

/// Number of log-posteriors expected per frame, or 0 for a null handle.
///
/// # Safety
/// `det` must be null or come from a `ctcat_detector_new*` call.
#[no_mangle]
pub unsafe extern "C" fn ctcat_detector_vocab_len(det: *const CtcatDetector) -> usize {
    if det.is_null() {
        0
    } else {
        (*det).inner.vocab_len()
    }
}

/// Embedding dimension expected per frame, or 0 for a null handle.
///
/// # Safety
/// `det` must be null or come from a `ctcat_detector_new*` call.
#[no_mangle]
pub unsafe extern "C" fn ctcat_detector_dim(det: *const CtcatDetector) -> usize {
    if det.is_null() {
        0
    } else {
        (*det).inner.dim()
    }
}

/// Releases a detector. Null is ignored.
///
/// # Safety
/// `det` must be null or come from a `ctcat_detector_new*` call, and must not
/// be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ctcat_detector_free(det: *mut CtcatDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ctcat_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ctcat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
