//! C ABI over the synfaith detector and metrics.
//!
//! Every fallible call returns an [`SfStatus`]. On failure the message is kept
//! per thread and can be fetched with [`sf_last_error_message`]. Handles are
//! opaque and must be released with their matching `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use synfaith::aggregator::FaithfulnessModel;
use synfaith::features::{AlignmentScorer, HttpAlignScorer, LexicalScorer, ReferenceSet};
use synfaith::fod::{SentenceScorer, SynCheck};
use synfaith::pipeline::ExtractorSpec;
use synfaith::trace::{parse_traces, FaithLabel};
use synfaith::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Parse = 4,
    Io = 5,
    Model = 6,
    Backend = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

impl From<&Error> for SfStatus {
    fn from(e: &Error) -> Self {
        match e {
            _ if e.is_transport() => SfStatus::Backend,
            Error::Parse { .. } | Error::InvalidRecord { .. } => SfStatus::Parse,
            Error::Io { .. } => SfStatus::Io,
            Error::Model(_) | Error::Detector { .. } => SfStatus::Model,
            _ => SfStatus::InvalidInput,
        }
    }
}

/// A loaded faithfulness detector: trained aggregator, reference activations
/// and an alignment scorer.
pub struct SfDetector {
    inner: SynCheck,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(SfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(SfStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SfStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            SfStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(SfStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SfStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The caller owns
/// the result and frees it with [`sf_string_free`].
#[no_mangle]
pub extern "C" fn sf_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |c| c.clone().into_raw()))
}

#[no_mangle]
pub unsafe extern "C" fn sf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load a detector from a saved model and extractor. `scorer_url` selects a
/// remote alignment service; pass null for the built-in lexical scorer.
#[no_mangle]
pub unsafe extern "C" fn sf_detector_load(
    model_path: *const c_char,
    extractor_path: *const c_char,
    scorer_url: *const c_char,
    out: *mut *mut SfDetector,
) -> SfStatus {
    guard(|| {
        non_null(out, "out")?;
        let model = FaithfulnessModel::load(Path::new(str_arg(model_path, "model_path")?))?;
        let spec = ExtractorSpec::load(Path::new(str_arg(extractor_path, "extractor_path")?))?;
        let scorer: Box<dyn AlignmentScorer> = if scorer_url.is_null() {
            Box::new(LexicalScorer)
        } else {
            Box::new(HttpAlignScorer::new(str_arg(scorer_url, "scorer_url")?)?)
        };
        let det = SfDetector { inner: SynCheck::new(model, spec.extractor(scorer)?) };
        *out = Box::into_raw(Box::new(det));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sf_detector_free(det: *mut SfDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Score every sentence of one trace given as a single-line JSON object.
/// `out_len` always receives the sentence count; when it exceeds `capacity`
/// nothing is written and the status is buffer-too-small.
#[no_mangle]
pub unsafe extern "C" fn sf_detector_score_trace(
    det: *const SfDetector,
    trace_json: *const c_char,
    out_scores: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> SfStatus {
    guard(|| {
        non_null(det, "detector")?;
        non_null(out_len, "out_len")?;
        let json = str_arg(trace_json, "trace_json")?;
        let mut traces = parse_traces("trace_json", json.as_bytes())?;
        if traces.len() != 1 {
            return Err(Fail(SfStatus::InvalidInput, format!("expected one trace, got {}", traces.len())));
        }
        let t = traces.remove(0);
        *out_len = t.sentences.len();
        if t.sentences.len() > capacity {
            return Err(Fail(
                SfStatus::BufferTooSmall,
                format!("trace has {} sentences, buffer holds {capacity}", t.sentences.len()),
            ));
        }
        let det = &(*det).inner;
        let scores: Vec<f64> = (0..t.sentences.len())
            .map(|i| det.score(&t.prompt, &t.context, &t.sentences[..i], &t.sentences[i]))
            .collect::<synfaith::Result<_>>()?;
        if !scores.is_empty() {
            non_null(out_scores, "out_scores")?;
            std::slice::from_raw_parts_mut(out_scores, scores.len()).copy_from_slice(&scores);
        }
        Ok(())
    })
}

/// AUROC of `scores` against `labels` (1 faithful, 0 unfaithful).
#[no_mangle]
pub unsafe extern "C" fn sf_auroc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> SfStatus {
    guard(|| {
        non_null(out, "out")?;
        let scores = slice_arg(scores, n, "scores")?;
        let labels: Vec<FaithLabel> = slice_arg(labels, n, "labels")?
            .iter()
            .map(|&l| match l {
                0 | 1 => Ok(FaithLabel::from(l == 1)),
                _ => Err(Fail(SfStatus::InvalidInput, format!("label {l} is not 0 or 1"))),
            })
            .collect::<Result<_, _>>()?;
        *out = synfaith::eval::auroc(scores, &labels)?;
        Ok(())
    })
}

/// LID estimate of `query` from its `k` nearest neighbours among `n_refs`
/// reference points stored row-major with `dim` values each.
#[no_mangle]
pub unsafe extern "C" fn sf_lid_mle(
    query: *const f64,
    refs: *const f64,
    n_refs: usize,
    dim: usize,
    k: usize,
    out: *mut f64,
) -> SfStatus {
    guard(|| {
        non_null(out, "out")?;
        let q = slice_arg(query, dim, "query")?;
        let flat = slice_arg(refs, n_refs.saturating_mul(dim), "refs")?;
        if dim == 0 {
            return Err(Fail(SfStatus::InvalidInput, "dimension must be at least 1".into()));
        }
        let points = flat.chunks(dim).map(<[f64]>::to_vec).collect();
        let set = ReferenceSet::new(0, points, "ffi")?;
        *out = synfaith::features::lid_mle(q, &set, k)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transport_wins_over_detector_wrapping() {
        let wrapped = Error::Detector { stage: "stage1", accepted: 0, source: Box::new(Error::Backend("down".into())) };
        assert_eq!(SfStatus::from(&wrapped), SfStatus::Backend);
        let model = Error::Detector { stage: "stage1", accepted: 0, source: Box::new(Error::Model("nan".into())) };
        assert_eq!(SfStatus::from(&model), SfStatus::Model);
        assert_eq!(SfStatus::from(&Error::input("x")), SfStatus::InvalidInput);
    }

    #[test]
    fn panics_become_a_status() {
        assert_eq!(guard(|| panic!("boom")), SfStatus::Panic);
        assert!(!sf_last_error_message().is_null());
    }
}
