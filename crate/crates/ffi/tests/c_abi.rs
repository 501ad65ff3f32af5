use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::ptr;

use sta_ffi::*;

fn fixture(name: &str) -> CString {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name);
    CString::new(p.to_str().unwrap()).unwrap()
}

fn take_string(p: *mut c_char) -> String {
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned();
    unsafe { sta_string_free(p) };
    s
}

fn last_error() -> String {
    let p = sta_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load_train() -> *mut StaDataset {
    let mut d = ptr::null_mut();
    let status = unsafe { sta_dataset_load_with_meta(fixture("train.jsonl").as_ptr(), fixture("meta.json").as_ptr(), &mut d) };
    assert_eq!(status, StaStatus::Ok);
    d
}

#[test]
fn dataset_handle_lifecycle() {
    let d = load_train();
    unsafe {
        assert_eq!(sta_dataset_len(d), 40);
        assert_eq!(sta_dataset_num_labels(d), 2);
        sta_dataset_free(d);
        assert_eq!(sta_dataset_len(ptr::null()), 0);
        sta_dataset_free(ptr::null_mut());
    }
}

#[test]
fn missing_file_reports_io_error() {
    let mut d = ptr::null_mut();
    let path = CString::new("/definitely/not/here.jsonl").unwrap();
    let topic = CString::new("movie review").unwrap();
    let status = unsafe { sta_dataset_load(path.as_ptr(), topic.as_ptr(), &mut d) };
    assert_eq!(status, StaStatus::Io);
    assert!(d.is_null());
    assert!(last_error().contains("here.jsonl"));
}

#[test]
fn null_arguments_are_rejected() {
    let mut d = ptr::null_mut();
    let status = unsafe { sta_dataset_load(ptr::null(), ptr::null(), &mut d) };
    assert_eq!(status, StaStatus::NullPointer);
    let mut out = 0.0;
    assert_eq!(unsafe { sta_softmax(ptr::null(), 2, &mut out) }, StaStatus::NullPointer);
}

#[test]
fn convert_writes_pairs() {
    let d = load_train();
    let dir = tempfile::tempdir().unwrap();
    let out = CString::new(dir.path().join("pairs.jsonl").to_str().unwrap()).unwrap();
    let mut n = 0usize;
    let status = unsafe { sta_convert_to_file(d, false, 3, out.as_ptr(), &mut n) };
    assert_eq!(status, StaStatus::Ok);
    // Five templates per example.
    assert_eq!(n, 200);
    let lines = std::fs::read_to_string(dir.path().join("pairs.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 200);
    let status = unsafe { sta_convert_to_file(d, true, 3, out.as_ptr(), &mut n) };
    assert_eq!(status, StaStatus::Ok);
    assert_eq!(n, 80);
    unsafe { sta_dataset_free(d) };
}

#[test]
fn model_generate_and_score() {
    let d = load_train();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sta_model_finetune_mock(d, false, 2, 1, &mut m) }, StaStatus::Ok);
    let mut fp = ptr::null_mut();
    assert_eq!(unsafe { sta_model_fingerprint(m, &mut fp) }, StaStatus::Ok);
    assert_eq!(take_string(fp).len(), 64);

    let prefix = CString::new("Description of movie review in positive: ").unwrap();
    let mut json = ptr::null_mut();
    let status = unsafe { sta_model_generate(m, prefix.as_ptr(), 40, 1.0, 32, 7, 3, &mut json) };
    assert_eq!(status, StaStatus::Ok);
    let texts: Vec<String> = serde_json::from_str(&take_string(json)).unwrap();
    assert_eq!(texts.len(), 3);

    let status = unsafe { sta_model_generate(m, prefix.as_ptr(), 40, 1.0, 32, 7, 0, &mut json) };
    assert_eq!(status, StaStatus::InvalidArgument);

    let source = CString::new("anything").unwrap();
    let target = CString::new("positive").unwrap();
    let mut score = 0.0;
    assert_eq!(unsafe { sta_model_score(m, source.as_ptr(), target.as_ptr(), &mut score) }, StaStatus::Ok);
    assert!(score < 0.0 && score.is_finite());
    unsafe {
        sta_model_free(m);
        sta_dataset_free(d);
    }
}

#[test]
fn augment_respects_budget() {
    let d = load_train();
    let cfg = CString::new(r#"{"beta": 1, "seed": 4}"#).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { sta_augment(d, cfg.as_ptr(), 1, &mut out) }, StaStatus::Ok);
    let jsonl = take_string(out);
    assert_eq!(jsonl.lines().count(), 40);
    assert!(jsonl.lines().all(|l| l.contains("\"provenance\":\"generated\"")));

    let bad = CString::new(r#"{"beta": 0}"#).unwrap();
    assert_eq!(unsafe { sta_augment(d, bad.as_ptr(), 1, &mut out) }, StaStatus::Config);
    unsafe { sta_dataset_free(d) };
}

#[test]
fn diversity_softmax_and_selection() {
    let texts = [CString::new("a b c d").unwrap(), CString::new("a b c").unwrap()];
    let ptrs: Vec<*const c_char> = texts.iter().map(|t| t.as_ptr()).collect();
    let mut ratio = 0.0;
    assert_eq!(unsafe { sta_diversity(ptrs.as_ptr(), 2, &mut ratio) }, StaStatus::Ok);
    assert!((ratio - 2.0 / 3.0).abs() < 1e-12);
    let short = [CString::new("too short").unwrap()];
    let ptrs: Vec<*const c_char> = short.iter().map(|t| t.as_ptr()).collect();
    assert_eq!(unsafe { sta_diversity(ptrs.as_ptr(), 1, &mut ratio) }, StaStatus::InvalidArgument);

    let u = [0.0, 3f64.ln()];
    let mut q = [0.0; 2];
    assert_eq!(unsafe { sta_softmax(u.as_ptr(), 2, q.as_mut_ptr()) }, StaStatus::Ok);
    assert!((q[0] - 0.25).abs() < 1e-12 && (q[1] - 0.75).abs() < 1e-12);

    let q = [0.5, 0.9, 0.9, 0.1];
    let u = [-1.0, -2.0, -1.0, -0.5];
    let mut idx = [usize::MAX; 3];
    let mut len = 0;
    assert_eq!(unsafe { sta_select_top(q.as_ptr(), u.as_ptr(), 4, 3, idx.as_mut_ptr(), &mut len) }, StaStatus::Ok);
    assert_eq!(len, 3);
    assert_eq!(idx, [2, 1, 0]);
}

#[test]
fn eda_operations() {
    let text = CString::new("the film is good and the cast is great").unwrap();
    for op in [StaEdaOp::SynonymReplace, StaEdaOp::RandomInsert, StaEdaOp::RandomSwap] {
        let mut out = ptr::null_mut();
        assert_eq!(unsafe { sta_eda(text.as_ptr(), op, 0.1, 0.1, 5, &mut out) }, StaStatus::Ok);
        let s = take_string(out);
        let n = s.split_whitespace().count();
        if op == StaEdaOp::RandomInsert {
            assert_eq!(n, 10);
        } else {
            assert_eq!(n, 9);
        }
    }
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { sta_eda(text.as_ptr(), StaEdaOp::RandomDelete, 0.1, 1.0, 5, &mut out) }, StaStatus::Ok);
    assert_eq!(take_string(out).split_whitespace().count(), 1);
    assert_eq!(unsafe { sta_eda(text.as_ptr(), StaEdaOp::RandomSwap, 2.0, 0.1, 5, &mut out) }, StaStatus::InvalidArgument);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/sta.h")).unwrap();
    for symbol in [
        "sta_last_error",
        "sta_string_free",
        "sta_dataset_load",
        "sta_dataset_load_with_meta",
        "sta_dataset_free",
        "sta_dataset_len",
        "sta_dataset_num_labels",
        "sta_convert_to_file",
        "sta_model_finetune_mock",
        "sta_model_free",
        "sta_model_fingerprint",
        "sta_model_generate",
        "sta_model_score",
        "sta_augment",
        "sta_diversity",
        "sta_softmax",
        "sta_select_top",
        "sta_eda",
        "typedef struct StaDataset StaDataset",
        "typedef struct StaModel StaModel",
        "STA_STATUS_OK = 0",
    ] {
        assert!(header.contains(symbol), "header lacks {symbol}");
    }
}
