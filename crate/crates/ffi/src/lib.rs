//! C ABI over the `sta` toolkit.
//!
//! Every fallible function returns a [`StaStatus`]; on failure the message is
//! available from [`sta_last_error`] on the same thread. Datasets and models
//! are opaque handles released with their `_free` function. Strings returned
//! through `char **` out-parameters are owned by the caller and released with
//! [`sta_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sta::augment::{run_sta, select_top, softmax, AugmentationConfig, ScoredCandidate};
use sta::corpus::{load_dataset, load_dataset_with_meta, Dataset, DatasetMeta, Record, PROVENANCE_GENERATED};
use sta::eda::{random_delete, random_insert, random_swap, synonym_replace, EdaParams, Lexicon};
use sta::eval::trigram_diversity;
use sta::gateway::mock::{MockBackend, MockModel};
use sta::gateway::{DecodingParams, FineTuneParams, FineTunedModel};
use sta::templates::{convert, write_pairs, ConvertOptions, TemplateFamily};
use sta::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    Dataset = 6,
    Template = 7,
    Backend = 8,
    Config = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StaEdaOp {
    SynonymReplace = 0,
    RandomInsert = 1,
    RandomSwap = 2,
    RandomDelete = 3,
}

/// Opaque labeled dataset.
pub struct StaDataset(Dataset);

/// Opaque model fine-tuned by the built-in mock backend.
pub struct StaModel(MockModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(StaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => StaStatus::Io,
            Error::Parse { .. } | Error::Json(_) => StaStatus::Parse,
            Error::EmptyDataset
            | Error::InvalidDataset(_)
            | Error::UnknownLabel(_)
            | Error::InsufficientExamples { .. } => StaStatus::Dataset,
            Error::Template { .. } => StaStatus::Template,
            Error::InvalidParams(_) => StaStatus::InvalidArgument,
            Error::Backend(_) => StaStatus::Backend,
            Error::Config(_) => StaStatus::Config,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(StaStatus::InvalidArgument, message.into())
}

/// Runs `f`, records its error message and turns panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> StaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            StaStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            StaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(StaStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(StaStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(StaStatus::NullPointer, format!("{name} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(StaStatus::NullPointer, format!("{name} is null")))
}

fn to_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| invalid("output contains a NUL byte"))
}

fn family(two_prompt: bool) -> TemplateFamily {
    if two_prompt {
        TemplateFamily::two_prompt()
    } else {
        TemplateFamily::full()
    }
}

/// Message describing the most recent call on this thread if it failed,
/// otherwise NULL. The pointer is valid until the next call into the library
/// from this thread.
#[no_mangle]
pub extern "C" fn sta_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sta_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a JSONL dataset whose inventory is the sorted set of labels seen.
///
/// # Safety
/// `path` and `topic` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sta_dataset_load(
    path: *const c_char,
    topic: *const c_char,
    out: *mut *mut StaDataset,
) -> StaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let d = load_dataset(Path::new(str_arg(path, "path")?), str_arg(topic, "topic")?)?;
        *out = Box::into_raw(Box::new(StaDataset(d)));
        Ok(())
    })
}

/// Loads a JSONL dataset described by a metadata sidecar file.
///
/// # Safety
/// `path` and `meta_path` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sta_dataset_load_with_meta(
    path: *const c_char,
    meta_path: *const c_char,
    out: *mut *mut StaDataset,
) -> StaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let meta = DatasetMeta::load(Path::new(str_arg(meta_path, "meta_path")?))?;
        let d = load_dataset_with_meta(Path::new(str_arg(path, "path")?), &meta)?;
        *out = Box::into_raw(Box::new(StaDataset(d)));
        Ok(())
    })
}

/// # Safety
/// `d` must be NULL or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn sta_dataset_free(d: *mut StaDataset) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Number of examples; 0 for NULL.
///
/// # Safety
/// `d` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sta_dataset_len(d: *const StaDataset) -> usize {
    d.as_ref().map_or(0, |d| d.0.len())
}

/// Size of the label inventory; 0 for NULL.
///
/// # Safety
/// `d` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sta_dataset_num_labels(d: *const StaDataset) -> usize {
    d.as_ref().map_or(0, |d| d.0.labels().len())
}

/// Converts `d` into prompt pairs and writes them as JSONL to `out_path`.
///
/// # Safety
/// `d` must be a live handle, `out_path` a NUL-terminated string and
/// `n_pairs` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn sta_convert_to_file(
    d: *const StaDataset,
    two_prompt: bool,
    seed: u64,
    out_path: *const c_char,
    n_pairs: *mut usize,
) -> StaStatus {
    guard(|| {
        let d = ref_arg(d, "dataset")?;
        let path = str_arg(out_path, "out_path")?;
        let conversion = convert(&d.0, &family(two_prompt), seed, ConvertOptions::default())?;
        write_pairs(Path::new(path), &conversion.pairs)?;
        if let Some(n) = n_pairs.as_mut() {
            *n = conversion.pairs.len();
        }
        Ok(())
    })
}

/// Converts `d` and fine-tunes the mock backend on the pairs with default
/// parameters and the given `epochs`.
///
/// # Safety
/// `d` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sta_model_finetune_mock(
    d: *const StaDataset,
    two_prompt: bool,
    epochs: usize,
    seed: u64,
    out: *mut *mut StaModel,
) -> StaStatus {
    guard(|| {
        let d = ref_arg(d, "dataset")?;
        let out = out_arg(out, "out")?;
        let conversion = convert(&d.0, &family(two_prompt), seed, ConvertOptions::default())?;
        let params = FineTuneParams {
            epochs,
            seed,
            ..FineTuneParams::default()
        };
        params.validate()?;
        let model = MockBackend::new().fit(&conversion.pairs, &params)?;
        *out = Box::into_raw(Box::new(StaModel(model)));
        Ok(())
    })
}

/// # Safety
/// `m` must be NULL or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn sta_model_free(m: *mut StaModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Model fingerprint as a newly allocated hex string.
///
/// # Safety
/// `m` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sta_model_fingerprint(m: *const StaModel, out: *mut *mut c_char) -> StaStatus {
    guard(|| {
        let m = ref_arg(m, "model")?;
        *out_arg(out, "out")? = to_c_string(m.0.fingerprint().to_string())?;
        Ok(())
    })
}

/// Samples `count` continuations of `prefix`; `out_json` receives a JSON
/// array of strings.
///
/// # Safety
/// `m` must be a live handle, `prefix` a NUL-terminated string and `out_json`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn sta_model_generate(
    m: *const StaModel,
    prefix: *const c_char,
    top_k: usize,
    top_p: f64,
    max_new_tokens: usize,
    seed: u64,
    count: usize,
    out_json: *mut *mut c_char,
) -> StaStatus {
    guard(|| {
        let m = ref_arg(m, "model")?;
        let prefix = str_arg(prefix, "prefix")?;
        let out = out_arg(out_json, "out_json")?;
        let params = DecodingParams {
            top_k,
            top_p,
            max_new_tokens,
            seed,
        };
        let texts = sta::gateway::generate(&m.0, prefix, &params, count)?;
        *out = to_c_string(serde_json::to_string(&texts).map_err(Error::from)?)?;
        Ok(())
    })
}

/// Log-probability of `target` given `source`.
///
/// # Safety
/// `m` must be a live handle, the strings NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sta_model_score(
    m: *const StaModel,
    source: *const c_char,
    target: *const c_char,
    out: *mut f64,
) -> StaStatus {
    guard(|| {
        let m = ref_arg(m, "model")?;
        let score = sta::gateway::score_target(&m.0, str_arg(source, "source")?, str_arg(target, "target")?)?;
        *out_arg(out, "out")? = score;
        Ok(())
    })
}

/// Runs conversion, mock fine-tuning, generation and selection on `d`.
/// `config_json` is an augmentation configuration object (NULL or `{}` for
/// defaults). `out_jsonl` receives the selected examples as JSON lines.
///
/// # Safety
/// `d` must be a live handle, `config_json` NULL or NUL-terminated and
/// `out_jsonl` writable.
#[no_mangle]
pub unsafe extern "C" fn sta_augment(
    d: *const StaDataset,
    config_json: *const c_char,
    epochs: usize,
    out_jsonl: *mut *mut c_char,
) -> StaStatus {
    guard(|| {
        let d = ref_arg(d, "dataset")?;
        let out = out_arg(out_jsonl, "out_jsonl")?;
        let cfg: AugmentationConfig = if config_json.is_null() {
            AugmentationConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?).map_err(Error::from)?
        };
        let ft = FineTuneParams {
            epochs,
            seed: cfg.seed,
            ..FineTuneParams::default()
        };
        let result = run_sta(&d.0, &cfg, &ft, &MockBackend::new())?;
        let mut text = String::new();
        for ex in result.generated.examples() {
            let record = Record {
                text: ex.text.clone(),
                label: ex.label.clone(),
                provenance: Some(PROVENANCE_GENERATED.to_string()),
            };
            text.push_str(&serde_json::to_string(&record).map_err(Error::from)?);
            text.push('\n');
        }
        *out = to_c_string(text)?;
        Ok(())
    })
}

/// Unique over total word trigrams of `n` texts. Fails with
/// `INVALID_ARGUMENT` when no text has three words.
///
/// # Safety
/// `texts` must point to `n` NUL-terminated strings and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn sta_diversity(texts: *const *const c_char, n: usize, out: *mut f64) -> StaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if texts.is_null() && n > 0 {
            return Err(Failure(StaStatus::NullPointer, "texts is null".into()));
        }
        let mut owned = Vec::with_capacity(n);
        for i in 0..n {
            owned.push(str_arg(*texts.add(i), "texts[i]")?);
        }
        *out = trigram_diversity(owned)
            .ratio
            .ok_or_else(|| invalid("no trigrams in the population"))?;
        Ok(())
    })
}

/// Numerically stable softmax of `n` scores into `out` (which may alias `u`).
///
/// # Safety
/// `u` and `out` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn sta_softmax(u: *const f64, n: usize, out: *mut f64) -> StaStatus {
    guard(|| {
        if u.is_null() || out.is_null() {
            return Err(Failure(StaStatus::NullPointer, "u or out is null".into()));
        }
        if n == 0 {
            return Err(invalid("softmax of zero scores"));
        }
        let q = softmax(std::slice::from_raw_parts(u, n));
        ptr::copy_nonoverlapping(q.as_ptr(), out, n);
        Ok(())
    })
}

/// Ranks `n` candidates by confidence `q` (descending), then score `u`
/// (descending), then index, and writes the indices of the first
/// `min(keep, n)` into `out_indices`; their number goes to `out_len`.
///
/// # Safety
/// `q` and `u` must point to `n` doubles, `out_indices` to `keep` slots and
/// `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sta_select_top(
    q: *const f64,
    u: *const f64,
    n: usize,
    keep: usize,
    out_indices: *mut usize,
    out_len: *mut usize,
) -> StaStatus {
    guard(|| {
        let out_len = out_arg(out_len, "out_len")?;
        if n > 0 && (q.is_null() || u.is_null()) {
            return Err(Failure(StaStatus::NullPointer, "q or u is null".into()));
        }
        if keep > 0 && out_indices.is_null() {
            return Err(Failure(StaStatus::NullPointer, "out_indices is null".into()));
        }
        let (q, u) = if n == 0 {
            (&[][..], &[][..])
        } else {
            (std::slice::from_raw_parts(q, n), std::slice::from_raw_parts(u, n))
        };
        if q.iter().chain(u).any(|v| v.is_nan()) {
            return Err(invalid("NaN score"));
        }
        let pool: Vec<ScoredCandidate> = (0..n)
            .map(|i| ScoredCandidate {
                index: i,
                text: String::new(),
                label: String::new(),
                u: u[i],
                q: q[i],
                scores: Vec::new(),
            })
            .collect();
        let chosen = select_top(&pool, keep);
        for (slot, c) in chosen.iter().enumerate() {
            *out_indices.add(slot) = c.index;
        }
        *out_len = chosen.len();
        Ok(())
    })
}

/// Applies one word-level edit operation with the built-in lexicon.
///
/// # Safety
/// `text` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sta_eda(
    text: *const c_char,
    op: StaEdaOp,
    op_fraction: f64,
    deletion_prob: f64,
    seed: u64,
    out: *mut *mut c_char,
) -> StaStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let out = out_arg(out, "out")?;
        let params = EdaParams {
            op_fraction,
            deletion_prob,
            seed,
        };
        params.validate()?;
        let lex = Lexicon::builtin();
        let result = match op {
            StaEdaOp::SynonymReplace => synonym_replace(text, &params, &lex),
            StaEdaOp::RandomInsert => random_insert(text, &params, &lex),
            StaEdaOp::RandomSwap => random_swap(text, &params),
            StaEdaOp::RandomDelete => random_delete(text, &params),
        };
        *out = to_c_string(result)?;
        Ok(())
    })
}
