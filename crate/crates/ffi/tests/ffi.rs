use std::ffi::{c_char, c_int, CStr, CString};
use std::ptr;

use likefilter::corpus::Document;
use likefilter::filter::TriggerPhrase;
use likefilter::lm::{score_trigger, train_ngram, uniform_lambda, ReferenceBackend};
use likefilter::tokenizer::build_vocab;
use likefilter_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(lf_last_error_message()) }.to_string_lossy().into_owned()
}

unsafe fn take(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_str().unwrap().to_owned();
    lf_string_free(s);
    out
}

#[test]
fn version_matches_package() {
    let v = unsafe { CStr::from_ptr(lf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn tokenize_returns_json_array() {
    let text = c("Hello, World!  ＡＢＣ's \"quoted\"");
    let mut out = ptr::null_mut();
    let status = unsafe { lf_tokenize_json(text.as_ptr(), &mut out) };
    assert_eq!(status, LfStatus::LfOk);
    let tokens: Vec<String> = serde_json::from_str(&unsafe { take(out) }).unwrap();
    assert_eq!(tokens, likefilter::tokenizer::tokenize("Hello, World!  ＡＢＣ's \"quoted\""));
    assert_eq!(tokens, ["hello", ",", "world", "!", "abc's", "\"", "quoted", "\""]);
}

#[test]
fn null_and_invalid_arguments_are_reported() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { lf_tokenize_json(ptr::null(), &mut out) }, LfStatus::LfNullArgument);
    assert!(last_error().contains("text"));
    assert!(out.is_null());

    let text = c("x");
    assert_eq!(unsafe { lf_tokenize_json(text.as_ptr(), ptr::null_mut()) }, LfStatus::LfNullArgument);
    assert!(last_error().contains("out_json"));

    let bad = [0xffu8, 0xfe, 0];
    assert_eq!(unsafe { lf_tokenize_json(bad.as_ptr().cast(), &mut out) }, LfStatus::LfInvalidUtf8);
    assert!(last_error().contains("UTF-8"));

    assert_eq!(unsafe { lf_tokenize_json(text.as_ptr(), &mut out) }, LfStatus::LfOk);
    assert_eq!(last_error(), "");
    unsafe { lf_string_free(out) };
}

#[test]
fn threshold_is_strict() {
    assert_eq!(lf_threshold_removes(-3.989315, -4.0), 1);
    assert_eq!(lf_threshold_removes(-4.0, -4.0), 0);
    assert_eq!(lf_threshold_removes(-4.5, -4.0), 0);
    assert_eq!(lf_threshold_removes(f64::NAN, -4.0), -1);
    assert_eq!(lf_threshold_removes(-1.0, f64::INFINITY), -1);
}

#[test]
fn blocklist_matches_whole_tokens_and_honours_allowlist() {
    let entries = c("# words\nslurx\nasian\n");
    let allow = c("asian\n");
    let mut bl = ptr::null_mut();
    assert_eq!(unsafe { lf_blocklist_from_text(entries.as_ptr(), allow.as_ptr(), &mut bl) }, LfStatus::LfOk);

    let mut word = ptr::null_mut();
    let mut matched: c_int = -1;
    for (text, expect) in [
        ("They said SLURX, twice.", Some("slurx")),
        ("slurxes is not the word", None),
        ("asian food", None),
        ("nothing here", None),
    ] {
        let t = c(text);
        assert_eq!(unsafe { lf_blocklist_match(bl, t.as_ptr(), &mut word, &mut matched) }, LfStatus::LfOk);
        match expect {
            Some(w) => {
                assert_eq!(matched, 1, "{text}");
                assert_eq!(unsafe { take(word) }, w);
            }
            None => {
                assert_eq!(matched, 0, "{text}");
                assert!(word.is_null());
            }
        }
    }

    let t = c("x");
    assert_eq!(unsafe { lf_blocklist_match(ptr::null(), t.as_ptr(), &mut word, &mut matched) }, LfStatus::LfNullArgument);
    unsafe { lf_blocklist_free(bl) };
    unsafe { lf_blocklist_free(ptr::null_mut()) };
}

#[test]
fn blocklist_load_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let entries = dir.path().join("block.txt");
    std::fs::write(&entries, "slurx\n").unwrap();
    let path = c(entries.to_str().unwrap());
    let mut bl = ptr::null_mut();
    assert_eq!(unsafe { lf_blocklist_load(path.as_ptr(), ptr::null(), &mut bl) }, LfStatus::LfOk);
    let t = c("a slurx b");
    let (mut word, mut matched) = (ptr::null_mut(), 0);
    assert_eq!(unsafe { lf_blocklist_match(bl, t.as_ptr(), &mut word, &mut matched) }, LfStatus::LfOk);
    assert_eq!(matched, 1);
    unsafe {
        lf_string_free(word);
        lf_blocklist_free(bl);
    }

    let missing = c(dir.path().join("nope.txt").to_str().unwrap());
    let mut bl = ptr::null_mut();
    assert_eq!(unsafe { lf_blocklist_load(missing.as_ptr(), ptr::null(), &mut bl) }, LfStatus::LfIo);
    assert!(bl.is_null());
    assert!(!last_error().is_empty());
}

fn save_model(dir: &std::path::Path, texts: &[&str], order: usize) -> (std::path::PathBuf, ReferenceBackend) {
    let docs: Vec<Document> = texts.iter().enumerate().map(|(i, t)| Document::new(format!("d{i}"), *t)).collect();
    let vocab = build_vocab(&docs, 1).unwrap();
    let model = train_ngram(&docs, order, vocab, &uniform_lambda(order)).unwrap();
    let path = dir.join("model.json");
    model.save(&path).unwrap();
    (path, ReferenceBackend::new(model))
}

#[test]
fn unigram_score_matches_hand_computation() {
    // N = 3 tokens, V = 3 (<unk>, a, b): P(a) = 3/6, P(b) = 2/6 with add-one
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = save_model(dir.path(), &["a a b"], 1);
    let p = c(path.to_str().unwrap());
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { lf_model_load(p.as_ptr(), &mut model) }, LfStatus::LfOk);
    assert_eq!(unsafe { lf_model_vocab_size(model) }, 3);

    let (doc, trig) = (c("b b"), c("a b"));
    let (mut mean, mut n) = (0.0, 0usize);
    assert_eq!(unsafe { lf_model_score_trigger(model, doc.as_ptr(), trig.as_ptr(), 384, &mut mean, &mut n) }, LfStatus::LfOk);
    let expected = ((3.0f64 / 6.0).ln() + (2.0f64 / 6.0).ln()) / 2.0;
    assert_eq!(n, 2);
    assert!((mean - expected).abs() < 1e-12, "{mean} vs {expected}");
    unsafe { lf_model_free(model) };
}

#[test]
fn trigram_score_agrees_with_library() {
    let dir = tempfile::tempdir().unwrap();
    let texts = ["The cat sat on the mat.", "The dog sat on the log!", "A cat and a dog, on a mat."];
    let (path, backend) = save_model(dir.path(), &texts, 3);
    let p = c(path.to_str().unwrap());
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { lf_model_load(p.as_ptr(), &mut model) }, LfStatus::LfOk);

    for (doc, trig, budget) in [
        ("the cat sat on", "the mat", 384),
        ("a dog and a cat sat on the log", "on a mat", 5),
        ("", "zebra crossing", 384),
    ] {
        let want = score_trigger(&backend, &Document::new("x", doc), &TriggerPhrase::new("t", trig), budget).unwrap();
        let (cd, ct) = (c(doc), c(trig));
        let (mut mean, mut n) = (0.0, 0usize);
        let status = unsafe { lf_model_score_trigger(model, cd.as_ptr(), ct.as_ptr(), budget, &mut mean, &mut n) };
        assert_eq!(status, LfStatus::LfOk);
        assert_eq!(mean.to_bits(), want.mean_logprob.to_bits());
        assert_eq!(n, want.token_count);
    }

    let (cd, ct) = (c("doc"), c("one two three"));
    let (mut mean, mut n) = (0.0, 0usize);
    let status = unsafe { lf_model_score_trigger(model, cd.as_ptr(), ct.as_ptr(), 2, &mut mean, &mut n) };
    assert_eq!(status, LfStatus::LfInvalidArgument);
    assert!(!last_error().is_empty());
    unsafe { lf_model_free(model) };
}

#[test]
fn model_load_failures() {
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { lf_model_load(ptr::null(), &mut model) }, LfStatus::LfNullArgument);
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("model.json");
    std::fs::write(&bogus, "{not json").unwrap();
    let p = c(bogus.to_str().unwrap());
    assert_eq!(unsafe { lf_model_load(p.as_ptr(), &mut model) }, LfStatus::LfIo);
    assert!(model.is_null());
    assert_eq!(unsafe { lf_model_vocab_size(ptr::null()) }, 0);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/likefilter.h")).unwrap();
    for name in [
        "lf_version",
        "lf_last_error_message",
        "lf_string_free",
        "lf_tokenize_json",
        "lf_threshold_removes",
        "lf_blocklist_load",
        "lf_blocklist_from_text",
        "lf_blocklist_match",
        "lf_blocklist_free",
        "lf_model_load",
        "lf_model_score_trigger",
        "lf_model_vocab_size",
        "lf_model_free",
        "LF_INVALID_UTF8",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
