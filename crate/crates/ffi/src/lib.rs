//! C ABI over the `a3net` library.
//!
//! Every fallible entry point returns an [`A3Status`]. On failure a
//! human-readable message is stored per thread and can be fetched with
//! [`a3net_last_error`]. Strings returned to the caller are owned by the
//! caller and must be released with [`a3net_string_free`].
//!
//! A model handle is not thread-safe: create, use and free it on one thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use a3net::config::DecodeConfig;
use a3net::corpus::{ImageView, Vocabulary};
use a3net::metrics::evaluate_texts;
use a3net::model::A3Net;
use a3net::training::{load_model, Checkpoint};
use a3net::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum A3Status {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Shape = 6,
    Contract = 7,
    NonFinite = 8,
    Panic = 9,
}

/// Corpus-level scores, each in `[0, 1]`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct A3Metrics {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
}

/// Opaque handle to a loaded model.
pub struct A3Model {
    model: A3Net,
    vocab: Vocabulary,
    decode: DecodeConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(A3Status, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } | Error::Index { .. } => A3Status::Shape,
            Error::Contract(_) => A3Status::Contract,
            Error::Config(_) | Error::Parse { .. } => A3Status::Config,
            Error::NonFinite(_) => A3Status::NonFinite,
            Error::Format(_) | Error::Json(_) => A3Status::Format,
            Error::Io(_) => A3Status::Io,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> A3Status {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => A3Status::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal panic: {msg}"));
            A3Status::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(A3Status::NullArgument, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(A3Status::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn to_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(A3Status::Format, "output contains an interior NUL byte".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn a3net_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL if the last
/// call succeeded. Valid until the next call into the library.
#[no_mangle]
pub extern "C" fn a3net_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint written by `a3net train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn a3net_model_load(path: *const c_char, out: *mut *mut A3Model) -> A3Status {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = read_str(path, "path")?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        let (model, vocab) = load_model(&ckpt)?;
        let handle = Box::new(A3Model {
            model,
            vocab,
            decode: ckpt.config.decode.clone(),
        });
        *out = Box::into_raw(handle);
        Ok(())
    })
}

/// Releases a model handle. NULL is ignored.
///
/// # Safety
/// `model` must come from [`a3net_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn a3net_model_free(model: *mut A3Model) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of tokens in the model's vocabulary, 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn a3net_model_vocab_size(model: *const A3Model) -> usize {
    model.as_ref().map_or(0, |m| m.vocab.len())
}

/// Overrides the beam width used by [`a3net_model_generate`]; 1 selects
/// greedy decoding.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn a3net_model_set_beam(model: *mut A3Model, beam: usize) -> A3Status {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        if beam == 0 {
            return Err(Failure(A3Status::Config, "beam width must be at least 1".into()));
        }
        m.decode.beam_size = beam;
        Ok(())
    })
}

/// Generates a report for one sample of `views` images, each row-major
/// `height × width × channels` with values in `[0, 1]`, stored back to back
/// in `pixels`. On success `*out_text` receives a string to be released with
/// [`a3net_string_free`].
///
/// # Safety
/// `pixels` must point to `views * height * width * channels` floats and
/// `out_text` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn a3net_model_generate(
    model: *const A3Model,
    pixels: *const f32,
    views: usize,
    height: usize,
    width: usize,
    channels: usize,
    out_text: *mut *mut c_char,
) -> A3Status {
    guard(|| {
        if out_text.is_null() {
            return Err(null("out_text"));
        }
        *out_text = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let per_view = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Failure(A3Status::Shape, "image dimensions overflow".into()))?;
        let total = per_view
            .checked_mul(views)
            .ok_or_else(|| Failure(A3Status::Shape, "image dimensions overflow".into()))?;
        if total == 0 {
            return Err(Failure(A3Status::Shape, "at least one non-empty view is required".into()));
        }
        let data = std::slice::from_raw_parts(pixels, total);
        let images = data
            .chunks_exact(per_view)
            .map(|c| ImageView::new(height, width, channels, c.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let text = m.model.generate_text(&images, &m.decode, &m.vocab)?;
        *out_text = to_c_string(text)?;
        Ok(())
    })
}

/// Scores `count` candidate reports against references of the same index.
///
/// # Safety
/// `candidates` and `references` must each point to `count` NUL-terminated
/// strings; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn a3net_evaluate(
    candidates: *const *const c_char,
    references: *const *const c_char,
    count: usize,
    out: *mut A3Metrics,
) -> A3Status {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if count > 0 && (candidates.is_null() || references.is_null()) {
            return Err(null("string array"));
        }
        let collect = |arr: *const *const c_char, what: &str| -> Result<Vec<&str>, Failure> {
            (0..count)
                .map(|i| read_str(*arr.add(i), &format!("{what}[{i}]")))
                .collect()
        };
        let cands = collect(candidates, "candidates")?;
        let refs = collect(references, "references")?;
        let r = evaluate_texts(&cands, &refs)?;
        *out = A3Metrics {
            bleu1: r.bleu1,
            bleu2: r.bleu2,
            bleu3: r.bleu3,
            bleu4: r.bleu4,
            meteor: r.meteor,
            rouge_l: r.rouge_l,
        };
        Ok(())
    })
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn a3net_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
