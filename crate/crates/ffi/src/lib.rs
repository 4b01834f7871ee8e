//! C ABI over a trained run directory.
//!
//! A recommender handle owns the catalog, the semantic-ID index, one
//! generator checkpoint and, when present, the reward model. Every entry
//! point returns an [`OnerecStatus`]; the text of the last failure on the
//! calling thread is available from [`onerec_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use onerec::align::{generate_items, item_codes};
use onerec::genmodel::GenModel;
use onerec::harness::commands::{ALIGNED_CKPT, CATALOG, CODEBOOKS, CONFIG, RM_CKPT, SEED_CKPT};
use onerec::harness::config::RunConfig;
use onerec::reward::RewardModel;
use onerec::simulator::{read_catalog, SyntheticCatalog};
use onerec::tokenizer::{CodebookStack, ItemId, ItemIndex};
use onerec::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnerecStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    MissingArtifact = 3,
    Integrity = 4,
    Io = 5,
    BufferTooSmall = 6,
    NoRewardModel = 7,
    Internal = 8,
}

/// Opaque recommender handle.
pub struct OnerecRecommender {
    catalog: SyntheticCatalog,
    index: ItemIndex,
    model: GenModel,
    rm: Option<RewardModel>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> OnerecStatus {
    match e {
        Error::MissingArtifact(_) => OnerecStatus::MissingArtifact,
        Error::Integrity { .. } => OnerecStatus::Integrity,
        Error::Io { .. } => OnerecStatus::Io,
        _ => OnerecStatus::InvalidArgument,
    }
}

fn fail(status: OnerecStatus, msg: impl Into<String>) -> OnerecStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (OnerecStatus, String)>) -> OnerecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            OnerecStatus::Ok
        }
        Ok(Err((s, m))) => fail(s, m),
        Err(_) => fail(OnerecStatus::Internal, "internal panic"),
    }
}

fn lift<T>(r: onerec::Result<T>) -> Result<T, (OnerecStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), (OnerecStatus, String)> {
    if p.is_null() {
        Err((OnerecStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], (OnerecStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, (OnerecStatus, String)> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (OnerecStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

fn item_ids(ids: &[u32]) -> Vec<ItemId> {
    ids.iter().map(|&i| ItemId(i)).collect()
}

fn open(dir: &Path, model: Option<&Path>) -> onerec::Result<OnerecRecommender> {
    let config = RunConfig::load(&dir.join(CONFIG))?;
    let catalog = read_catalog(&dir.join(CATALOG))?;
    let stack = CodebookStack::load(&dir.join(CODEBOOKS))?;
    let index = ItemIndex::build(&catalog.items, &stack)?;
    let model_path = match model {
        Some(p) => p.to_path_buf(),
        None if dir.join(ALIGNED_CKPT).exists() => dir.join(ALIGNED_CKPT),
        None => dir.join(SEED_CKPT),
    };
    let model = GenModel::load(&model_path, config.model.clone(), false)?;
    let rm_path = dir.join(RM_CKPT);
    let rm = if rm_path.exists() { Some(RewardModel::load(&rm_path, config.reward.clone(), false)?) } else { None };
    Ok(OnerecRecommender { catalog, index, model, rm })
}

/// Opens the run directory `run_dir`. `model_path` may be null to use the
/// aligned checkpoint when present and the seed checkpoint otherwise. On
/// success `*out` receives a handle to release with
/// [`onerec_recommender_free`].
///
/// # Safety
/// `run_dir` must be a NUL-terminated string, `model_path` null or a
/// NUL-terminated string, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn onerec_recommender_open(
    run_dir: *const c_char,
    model_path: *const c_char,
    out: *mut *mut OnerecRecommender,
) -> OnerecStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let dir = path_arg(run_dir, "run_dir")?;
        let model = if model_path.is_null() { None } else { Some(path_arg(model_path, "model_path")?) };
        let r = lift(open(&dir, model.as_deref()))?;
        *out = Box::into_raw(Box::new(r));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `handle` must come from [`onerec_recommender_open`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn onerec_recommender_free(handle: *mut OnerecRecommender) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Items per generated session, or 0 for a null handle.
///
/// # Safety
/// `handle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn onerec_session_size(handle: *const OnerecRecommender) -> usize {
    handle.as_ref().map_or(0, |h| h.model.config.session_size)
}

/// Number of catalog items, or 0 for a null handle.
///
/// # Safety
/// `handle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn onerec_catalog_size(handle: *const OnerecRecommender) -> usize {
    handle.as_ref().map_or(0, |h| h.catalog.len())
}

/// Beam-searches up to `top_n` sessions for a user with the given history
/// (oldest first). Session `j` is written to
/// `out_items[j * session_size .. (j + 1) * session_size]` and its
/// log-probability to `out_log_probs[j]` (which may be null). `*out_count`
/// receives the number of sessions written, best first.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `out_items` must hold
/// `items_capacity` values.
#[no_mangle]
pub unsafe extern "C" fn onerec_generate(
    handle: *const OnerecRecommender,
    history: *const u32,
    history_len: usize,
    top_n: usize,
    out_items: *mut u32,
    items_capacity: usize,
    out_log_probs: *mut f64,
    out_count: *mut usize,
) -> OnerecStatus {
    guard(|| {
        non_null(handle, "handle")?;
        non_null(out_items, "out_items")?;
        non_null(out_count, "out_count")?;
        *out_count = 0;
        let h = &*handle;
        if top_n == 0 {
            return Err((OnerecStatus::InvalidArgument, "top_n must be positive".into()));
        }
        let m = h.model.config.session_size;
        if items_capacity < top_n * m {
            return Err((OnerecStatus::BufferTooSmall, format!("need {} item slots", top_n * m)));
        }
        let hist = item_ids(slice(history, history_len, "history")?);
        let codes = lift(item_codes(&h.index, &hist))?;
        let tokens = lift(h.model.history_tokens(&codes))?;
        let sessions = lift(generate_items(&h.model, &h.index, &tokens, top_n, true))?;
        let items = std::slice::from_raw_parts_mut(out_items, items_capacity);
        for (j, (s, lp)) in sessions.iter().enumerate() {
            for (k, it) in s.iter().enumerate() {
                items[j * m + k] = it.0;
            }
            if !out_log_probs.is_null() {
                *out_log_probs.add(j) = *lp;
            }
        }
        *out_count = sessions.len();
        Ok(())
    })
}

/// Reward-model predictions for one session: `out_targets` receives
/// (swt, vtr, wtr, ltr) and `out_score` (may be null) their configured
/// combination.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `out_targets` must hold
/// four values.
#[no_mangle]
pub unsafe extern "C" fn onerec_score(
    handle: *const OnerecRecommender,
    history: *const u32,
    history_len: usize,
    session: *const u32,
    session_len: usize,
    out_targets: *mut f64,
    out_score: *mut f64,
) -> OnerecStatus {
    guard(|| {
        non_null(handle, "handle")?;
        non_null(out_targets, "out_targets")?;
        let h = &*handle;
        let rm = h.rm.as_ref().ok_or((OnerecStatus::NoRewardModel, "run directory has no reward model".to_string()))?;
        let hist = item_ids(slice(history, history_len, "history")?);
        let sess = item_ids(slice(session, session_len, "session")?);
        let r = lift(rm.predict_items(&h.catalog.items, &hist, &sess))?;
        std::slice::from_raw_parts_mut(out_targets, 4).copy_from_slice(&r.as_array());
        if !out_score.is_null() {
            *out_score = rm.combine(&r);
        }
        Ok(())
    })
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `capacity`, and returns its full length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn onerec_last_error(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && capacity > 0 {
            let n = e.len().min(capacity - 1);
            ptr::copy_nonoverlapping(e.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn onerec_status_name(status: OnerecStatus) -> *const c_char {
    let s: &'static CStr = match status {
        OnerecStatus::Ok => c"ok",
        OnerecStatus::NullArgument => c"null argument",
        OnerecStatus::InvalidArgument => c"invalid argument",
        OnerecStatus::MissingArtifact => c"missing artifact",
        OnerecStatus::Integrity => c"integrity failure",
        OnerecStatus::Io => c"i/o error",
        OnerecStatus::BufferTooSmall => c"buffer too small",
        OnerecStatus::NoRewardModel => c"no reward model",
        OnerecStatus::Internal => c"internal error",
    };
    s.as_ptr()
}
