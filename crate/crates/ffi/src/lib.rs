//! C ABI for the attribution engine.
//!
//! Conventions:
//! - Handles (`ViModel`, `ViDataset`) are opaque pointers created by the
//!   `_load` functions and released by the matching `_free` functions.
//! - Every fallible call returns a `ViStatus`; on failure a thread-local
//!   message is retrievable via [`vi_last_error`].
//! - Callers own all score buffers; functions write at most `capacity`
//!   floats and report the true length, failing with `BufferTooSmall`
//!   when the buffer cannot hold the result.
//! - Panics never cross the boundary; they surface as `ViStatus::Panic`.
//!
//! The matching declarations live in `include/vqa_interp.h`.

use libc::{c_char, size_t};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use vqa_interp::attribution::{
    guided_bp_attribute, occlusion_attribute_words, MapSource, OcclusionConfig, SeedTarget,
    WordNorm,
};
use vqa_interp::data::Dataset;
use vqa_interp::evaluation::{compute_image_map, EvalConfig};
use vqa_interp::model::VqaModel;
use vqa_interp::train::dataset_mean_rgb;
use vqa_interp::{checkpoint, data};

/// Status code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    IoError = 3,
    ParseError = 4,
    /// Checkpoint and dataset disagree on vocabulary or answer inventory.
    Mismatch = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Attribution method selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViMethod {
    Guided = 0,
    Occlusion = 1,
    Random = 2,
}

/// Opaque trained-model handle.
pub struct ViModel {
    inner: VqaModel,
}

/// Opaque dataset handle.
pub struct ViDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(e: &vqa_interp::Error) -> ViStatus {
    use vqa_interp::Error::*;
    match e {
        Io(_) => ViStatus::IoError,
        CheckpointManifest { .. } | CheckpointShape { .. } | CheckpointTruncated { .. }
        | CheckpointModel { .. } | DatasetRecord { .. } | DatasetTruncated { .. }
        | DatasetHeader { .. } => ViStatus::ParseError,
        _ => ViStatus::InvalidArgument,
    }
}

/// Copy the last error message into `buf` (NUL-terminated, truncating).
/// Returns the full message length in bytes excluding the terminator.
///
/// # Safety
/// `buf` must point to `capacity` writable bytes, or be NULL (the call then
/// only reports the length).
#[no_mangle]
pub unsafe extern "C" fn vi_last_error(buf: *mut c_char, capacity: size_t) -> size_t {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && capacity > 0 {
            let n = bytes.len().min(capacity - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, ViStatus> {
    if path.is_null() {
        set_error("path is NULL");
        return Err(ViStatus::NullArgument);
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(ViStatus::InvalidArgument)
        }
    }
}

fn guarded(f: impl FnOnce() -> ViStatus) -> ViStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            ViStatus::Panic
        }
    }
}

/// Load a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer; on
/// `Ok` the caller owns the handle and must release it with
/// [`vi_model_free`].
#[no_mangle]
pub unsafe extern "C" fn vi_model_load(path: *const c_char, out: *mut *mut ViModel) -> ViStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is NULL");
            return ViStatus::NullArgument;
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match checkpoint::load_model(path) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(ViModel { inner: model }));
                ViStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Release a model handle. NULL is a no-op.
///
/// # Safety
/// `model` must come from [`vi_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn vi_model_free(model: *mut ViModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle from [`vi_model_load`].
#[no_mangle]
pub unsafe extern "C" fn vi_model_vocab_size(model: *const ViModel) -> size_t {
    if model.is_null() {
        return 0;
    }
    (*model).inner.vocab_size
}

/// # Safety
/// `model` must be a live handle from [`vi_model_load`].
#[no_mangle]
pub unsafe extern "C" fn vi_model_answer_count(model: *const ViModel) -> size_t {
    if model.is_null() {
        return 0;
    }
    (*model).inner.answer_count
}

/// Load a JSON-lines dataset.
///
/// # Safety
/// As for [`vi_model_load`]; release with [`vi_dataset_free`].
#[no_mangle]
pub unsafe extern "C" fn vi_dataset_load(path: *const c_char, out: *mut *mut ViDataset) -> ViStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is NULL");
            return ViStatus::NullArgument;
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match data::read_dataset(path) {
            Ok(ds) => {
                *out = Box::into_raw(Box::new(ViDataset { inner: ds }));
                ViStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Release a dataset handle. NULL is a no-op.
///
/// # Safety
/// `dataset` must come from [`vi_dataset_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn vi_dataset_free(dataset: *mut ViDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `dataset` must be a live handle from [`vi_dataset_load`].
#[no_mangle]
pub unsafe extern "C" fn vi_dataset_len(dataset: *const ViDataset) -> size_t {
    if dataset.is_null() {
        return 0;
    }
    (*dataset).inner.examples.len()
}

unsafe fn handles<'a>(
    model: *const ViModel,
    dataset: *const ViDataset,
    index: size_t,
) -> Result<(&'a VqaModel, &'a Dataset, usize), ViStatus> {
    if model.is_null() || dataset.is_null() {
        set_error("model or dataset is NULL");
        return Err(ViStatus::NullArgument);
    }
    let m = &(*model).inner;
    let d = &(*dataset).inner;
    if m.vocab_size != d.vocab.len() || m.answer_count != d.answers.len() {
        set_error("checkpoint and dataset disagree on vocabulary or answers");
        return Err(ViStatus::Mismatch);
    }
    if index >= d.examples.len() {
        set_error("example index out of range");
        return Err(ViStatus::InvalidArgument);
    }
    Ok((m, d, index))
}

fn eval_config(model: &VqaModel, ds: &Dataset, seed: u64) -> Result<EvalConfig, vqa_interp::Error> {
    let patch = model
        .train_mean_rgb
        .unwrap_or_else(|| dataset_mean_rgb(&ds.examples));
    let mut cfg = EvalConfig::new(OcclusionConfig::with_patch(patch)?);
    cfg.random_seed = seed;
    Ok(cfg)
}

/// Predicted answer index and its probability for one example.
///
/// # Safety
/// Handles must be live; `out_answer` and `out_prob` may be NULL to skip.
#[no_mangle]
pub unsafe extern "C" fn vi_predict(
    model: *const ViModel,
    dataset: *const ViDataset,
    index: size_t,
    out_answer: *mut size_t,
    out_prob: *mut f32,
) -> ViStatus {
    guarded(|| {
        let (m, d, i) = match handles(model, dataset, index) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let ex = &d.examples[i];
        match m.forward_infer(&ex.image, &ex.question) {
            Ok(dist) => {
                if !out_answer.is_null() {
                    *out_answer = dist.predicted;
                }
                if !out_prob.is_null() {
                    *out_prob = dist.predicted_prob;
                }
                ViStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Image importance map for one example. All methods produce maps on the
/// 16x16 occlusion grid (guided maps are mean-pooled from pixel
/// resolution); `seed` only affects the random baseline.
///
/// # Safety
/// Handles must be live; `out_scores` must hold `capacity` floats;
/// `out_rows`/`out_cols` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn vi_attribute_image(
    model: *const ViModel,
    dataset: *const ViDataset,
    index: size_t,
    method: ViMethod,
    seed: u64,
    out_scores: *mut f32,
    capacity: size_t,
    out_rows: *mut size_t,
    out_cols: *mut size_t,
) -> ViStatus {
    guarded(|| {
        let (m, d, i) = match handles(model, dataset, index) {
            Ok(v) => v,
            Err(s) => return s,
        };
        if out_scores.is_null() {
            set_error("out_scores is NULL");
            return ViStatus::NullArgument;
        }
        let source = match method {
            ViMethod::Guided => MapSource::GuidedBp,
            ViMethod::Occlusion => MapSource::Occlusion,
            ViMethod::Random => MapSource::Random,
        };
        let cfg = match eval_config(m, d, seed) {
            Ok(c) => c,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        let map = match compute_image_map(source, m, &d.examples[i], i, &cfg) {
            Ok(map) => map,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        if map.scores.len() > capacity {
            set_error(&format!(
                "map holds {} scores but capacity is {capacity}",
                map.scores.len()
            ));
            return ViStatus::BufferTooSmall;
        }
        std::ptr::copy_nonoverlapping(map.scores.as_ptr(), out_scores, map.scores.len());
        if !out_rows.is_null() {
            *out_rows = map.rows();
        }
        if !out_cols.is_null() {
            *out_cols = map.cols();
        }
        ViStatus::Ok
    })
}

/// Per-token word importance for one example. `Random` is not a word
/// method and is rejected.
///
/// # Safety
/// As for [`vi_attribute_image`]; `out_len` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn vi_attribute_words(
    model: *const ViModel,
    dataset: *const ViDataset,
    index: size_t,
    method: ViMethod,
    out_scores: *mut f32,
    capacity: size_t,
    out_len: *mut size_t,
) -> ViStatus {
    guarded(|| {
        let (m, d, i) = match handles(model, dataset, index) {
            Ok(v) => v,
            Err(s) => return s,
        };
        if out_scores.is_null() {
            set_error("out_scores is NULL");
            return ViStatus::NullArgument;
        }
        let ex = &d.examples[i];
        let words = match method {
            ViMethod::Occlusion => occlusion_attribute_words(m, &ex.image, &ex.question),
            ViMethod::Guided => {
                guided_bp_attribute(m, &ex.image, &ex.question, WordNorm::L2, SeedTarget::Probability)
                    .map(|(_, w)| w)
            }
            ViMethod::Random => {
                set_error("word importance is only defined for guided and occlusion");
                return ViStatus::InvalidArgument;
            }
        };
        match words {
            Ok(w) => {
                if w.scores.len() > capacity {
                    set_error(&format!(
                        "{} word scores but capacity is {capacity}",
                        w.scores.len()
                    ));
                    return ViStatus::BufferTooSmall;
                }
                std::ptr::copy_nonoverlapping(w.scores.as_ptr(), out_scores, w.scores.len());
                if !out_len.is_null() {
                    *out_len = w.scores.len();
                }
                ViStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}
