use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use synfaith::aggregator::ModelKind;
use synfaith::backend::scenarios::rag_demo;
use synfaith::backend::MockLm;
use synfaith::features::{FeatureConfig, LexicalScorer};
use synfaith::fod::SentenceScorer;
use synfaith::pipeline::{attach_oracle_labels, generate_traces, scenario_prompts, train_detector, Sampling};
use synfaith::trace::GenerationTrace;
use synfaith_ffi::*;

fn last_error() -> String {
    let p = sf_last_error_message();
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string();
    unsafe { sf_string_free(p) };
    s
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    model: PathBuf,
    extractor: PathBuf,
    traces: Vec<GenerationTrace>,
    scores: Vec<Vec<f64>>,
}

fn fixture() -> Fixture {
    let lm = MockLm::new(rag_demo(), 0).unwrap();
    let s = Sampling::Sample { temperature: 1.0, seed: 4, repeats: 3 };
    let mut traces = generate_traces(&lm, &scenario_prompts(lm.spec()), s, 24).unwrap();
    attach_oracle_labels(&lm, &mut traces).unwrap();
    let config = FeatureConfig { lid_layers: vec![16], lid_k: 5, ..FeatureConfig::default() };
    let (det, spec, _) = train_detector(&traces, config, 30, ModelKind::Logistic, None, Box::new(LexicalScorer), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    let extractor = dir.path().join("extractor.json");
    det.model.save(&model).unwrap();
    spec.save(&extractor).unwrap();
    let scores = traces
        .iter()
        .map(|t| {
            (0..t.sentences.len())
                .map(|i| det.score(&t.prompt, &t.context, &t.sentences[..i], &t.sentences[i]).unwrap())
                .collect()
        })
        .collect();
    Fixture { _dir: dir, model, extractor, traces, scores }
}

fn load(f: &Fixture) -> *mut SfDetector {
    let (m, x) = (c(f.model.to_str().unwrap()), c(f.extractor.to_str().unwrap()));
    let mut det = ptr::null_mut();
    assert_eq!(unsafe { sf_detector_load(m.as_ptr(), x.as_ptr(), ptr::null(), &mut det) }, SfStatus::Ok);
    assert!(!det.is_null());
    det
}

#[test]
fn scores_match_the_library() {
    let f = fixture();
    let det = load(&f);
    for (t, want) in f.traces.iter().zip(&f.scores) {
        let json = c(&serde_json::to_string(t).unwrap());
        let mut buf = vec![0.0; 32];
        let mut n = 0usize;
        let st = unsafe { sf_detector_score_trace(det, json.as_ptr(), buf.as_mut_ptr(), buf.len(), &mut n) };
        assert_eq!(st, SfStatus::Ok);
        assert_eq!(&buf[..n], want.as_slice());
    }
    unsafe { sf_detector_free(det) };
}

#[test]
fn small_buffer_reports_the_needed_length() {
    let f = fixture();
    let det = load(&f);
    let t = f.traces.iter().find(|t| t.sentences.len() > 1).unwrap();
    let json = c(&serde_json::to_string(t).unwrap());
    let mut one = [7.0];
    let mut n = 0usize;
    let st = unsafe { sf_detector_score_trace(det, json.as_ptr(), one.as_mut_ptr(), 1, &mut n) };
    assert_eq!(st, SfStatus::BufferTooSmall);
    assert_eq!(n, t.sentences.len());
    assert_eq!(one[0], 7.0);
    assert!(last_error().contains("buffer"));
    unsafe { sf_detector_free(det) };
}

#[test]
fn load_failures_carry_codes_and_messages() {
    let mut det = ptr::null_mut();
    let missing = c("/nonexistent/model.json");
    let st = unsafe { sf_detector_load(missing.as_ptr(), missing.as_ptr(), ptr::null(), &mut det) };
    assert_eq!(st, SfStatus::Io);
    assert!(det.is_null());
    assert!(last_error().contains("/nonexistent/model.json"));

    let st = unsafe { sf_detector_load(ptr::null(), missing.as_ptr(), ptr::null(), &mut det) };
    assert_eq!(st, SfStatus::NullArgument);
    assert!(last_error().contains("model_path"));

    let bad = [0xffu8, 0];
    let st = unsafe { sf_detector_load(bad.as_ptr().cast(), missing.as_ptr(), ptr::null(), &mut det) };
    assert_eq!(st, SfStatus::InvalidUtf8);
}

#[test]
fn malformed_trace_is_a_parse_error() {
    let f = fixture();
    let det = load(&f);
    let json = c("{\"id\": 3}");
    let mut n = 0usize;
    let st = unsafe { sf_detector_score_trace(det, json.as_ptr(), ptr::null_mut(), 0, &mut n) };
    assert_eq!(st, SfStatus::Parse);
    assert!(!last_error().is_empty());
    unsafe { sf_detector_free(det) };
}

#[test]
fn success_clears_the_last_error() {
    let mut out = 0.0;
    assert_eq!(unsafe { sf_auroc(ptr::null(), ptr::null(), 3, &mut out) }, SfStatus::NullArgument);
    let (s, l) = ([0.9, 0.6, 0.7, 0.8], [1u8, 0, 1, 0]);
    assert_eq!(unsafe { sf_auroc(s.as_ptr(), l.as_ptr(), 4, &mut out) }, SfStatus::Ok);
    assert_eq!(out, 0.75);
    assert!(sf_last_error_message().is_null());
}

#[test]
fn auroc_rejects_bad_labels_and_single_class() {
    let mut out = 0.0;
    let s = [0.1, 0.2];
    assert_eq!(unsafe { sf_auroc(s.as_ptr(), [1u8, 2].as_ptr(), 2, &mut out) }, SfStatus::InvalidInput);
    assert!(last_error().contains("label 2"));
    assert_eq!(unsafe { sf_auroc(s.as_ptr(), [1u8, 1].as_ptr(), 2, &mut out) }, SfStatus::InvalidInput);
}

#[test]
fn lid_fixture() {
    let refs = [1.0, 0.0, 0.0, 2.0, -4.0, 0.0, 9.0, 9.0];
    let mut out = 0.0;
    assert_eq!(unsafe { sf_lid_mle([0.0, 0.0].as_ptr(), refs.as_ptr(), 4, 2, 3, &mut out) }, SfStatus::Ok);
    assert!((out - 0.9618).abs() < 1e-4, "{out}");
    assert_eq!(unsafe { sf_lid_mle([0.0, 0.0].as_ptr(), refs.as_ptr(), 4, 2, 5, &mut out) }, SfStatus::InvalidInput);
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(sf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/synfaith.h")
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(header()).unwrap();
    for name in [
        "sf_version",
        "sf_last_error_message",
        "sf_string_free",
        "sf_detector_load",
        "sf_detector_free",
        "sf_detector_score_trace",
        "sf_auroc",
        "sf_lid_mle",
        "typedef struct SfDetector SfDetector",
        "SF_STATUS_BUFFER_TOO_SMALL = 8",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "synfaith.h"

int main(void) {
    double s[4] = {0.9, 0.6, 0.7, 0.8};
    uint8_t l[4] = {1, 0, 1, 0};
    double out = 0;
    if (sf_auroc(s, l, 4, &out) != SF_STATUS_OK) return 1;
    SfDetector *det = NULL;
    SfStatus st = sf_detector_load("/nonexistent", "/nonexistent", NULL, &det);
    char *msg = sf_last_error_message();
    printf("%.4f %d %s\n", out, (int)st, msg ? "message" : "none");
    sf_string_free(msg);
    return 0;
}
"#;

/// Compile a C caller against the header and the static library.
#[test]
fn c_program_links_against_static_library() {
    let Some(cc) = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
    else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib = [deps.join("libsynfaith_ffi.a"), deps.parent().unwrap().join("libsynfaith_ffi.a")]
        .into_iter()
        .find(|p| p.exists())
        .expect("static library next to the test binary");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let build = Command::new(cc)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success());
    assert_eq!(String::from_utf8_lossy(&run.stdout), "0.7500 5 message\n");
}
