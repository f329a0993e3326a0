//! C ABI over `tpn_core`: dataset handling, training, and evaluation
//! behind opaque pointers.
//!
//! Conventions:
//!
//! - Every fallible call returns a [`TpnStatus`]; `TPN_STATUS_OK` is zero.
//! - Outputs are written through `out_*` pointers, and only on success.
//! - On failure, [`tpn_last_error`] returns a message for the calling
//!   thread, valid until its next failing call.
//! - Handles are freed exactly once with the matching `*_free` function.
//!   Passing a handle after freeing it is undefined behavior, as with any
//!   C library.
//! - Strings cross the boundary as NUL-terminated UTF-8.
//!
//! Training options are passed as config text, one `key = value` per line,
//! in the same format the CLI accepts and checkpoints embed. Unspecified
//! keys keep their defaults.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::str::FromStr;

use tpn_core::bench::eval;
use tpn_core::episodes::{gen_synthetic, load_fsds, save_fsds, Dataset, Split, SyntheticKind};
use tpn_core::training::{train, Checkpoint, TrainConfig};
use tpn_core::Error;

/// Result of every fallible FFI call. Mirrors the CLI exit codes:
/// usage errors, data errors, numerical errors.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpnStatus {
    /// Success.
    Ok = 0,
    /// Invalid argument or configuration.
    InvalidArgument = 1,
    /// Dataset, file format, or I/O failure.
    Data = 2,
    /// Numerical failure: singular system, NaN, non-convergence.
    Numerical = 3,
    /// A required pointer argument was NULL.
    NullPointer = 4,
}

/// Opaque dataset handle.
pub struct TpnDataset {
    inner: Dataset,
}

/// Opaque training checkpoint handle: model parameters, optimizer state,
/// and the embedded config text.
pub struct TpnCheckpoint {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: TpnStatus, msg: &str) -> TpnStatus {
    let owned = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
    status
}

fn fail_err(err: &Error) -> TpnStatus {
    let status = match err.exit_code() {
        1 => TpnStatus::InvalidArgument,
        2 => TpnStatus::Data,
        _ => TpnStatus::Numerical,
    };
    fail(status, &err.to_string())
}

fn fail_null(arg: &str) -> TpnStatus {
    fail(TpnStatus::NullPointer, &format!("{arg} must not be NULL"))
}

/// Reads a required C string argument; `name` labels it in error messages.
unsafe fn read_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, TpnStatus> {
    if ptr.is_null() {
        return Err(fail_null(name));
    }
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| fail(TpnStatus::InvalidArgument, &format!("{name} is not valid UTF-8")))
}

fn parse_split(s: &str) -> Result<Option<Split>, TpnStatus> {
    match s {
        "train" => Ok(Some(Split::Train)),
        "val" => Ok(Some(Split::Val)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        other => Err(fail(
            TpnStatus::InvalidArgument,
            &format!("unknown split {other:?}, expected train, val, test or all"),
        )),
    }
}

/// Returns the library version as a static string.
#[no_mangle]
pub extern "C" fn tpn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Returns the message of the calling thread's most recent failure, or an
/// empty string if none. The pointer is valid until the thread's next
/// failing call into this library.
#[no_mangle]
pub extern "C" fn tpn_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Generates a synthetic dataset. `kind` is one of `gaussian-blobs`,
/// `concentric-rings`, `noisy-arcs`.
///
/// # Safety
/// `kind` must be NUL-terminated; `out_dataset` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tpn_dataset_generate(
    kind: *const c_char,
    classes: usize,
    per_class: usize,
    dim: usize,
    noise: f64,
    seed: u64,
    out_dataset: *mut *mut TpnDataset,
) -> TpnStatus {
    if out_dataset.is_null() {
        return fail_null("out_dataset");
    }
    let kind = match unsafe { read_str(kind, "kind") } {
        Ok(s) => s,
        Err(status) => return status,
    };
    let kind = match SyntheticKind::from_str(kind) {
        Ok(k) => k,
        Err(e) => return fail_err(&e),
    };
    match gen_synthetic(kind, classes, per_class, dim, noise, seed) {
        Ok(ds) => {
            unsafe { *out_dataset = Box::into_raw(Box::new(TpnDataset { inner: ds })) };
            TpnStatus::Ok
        }
        Err(e) => fail_err(&e),
    }
}

/// Loads a dataset from an FSDS file. Split assignments come from the
/// `.split` sidecar next to `path` when present.
///
/// # Safety
/// `path` must be NUL-terminated; `out_dataset` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tpn_dataset_load(
    path: *const c_char,
    out_dataset: *mut *mut TpnDataset,
) -> TpnStatus {
    if out_dataset.is_null() {
        return fail_null("out_dataset");
    }
    let path = match unsafe { read_str(path, "path") } {
        Ok(s) => PathBuf::from(s),
        Err(status) => return status,
    };
    match load_fsds(&path) {
        Ok(ds) => {
            unsafe { *out_dataset = Box::into_raw(Box::new(TpnDataset { inner: ds })) };
            TpnStatus::Ok
        }
        Err(e) => fail_err(&e),
    }
}

/// Saves a dataset as FSDS plus its `.split` sidecar.
///
/// # Safety
/// `dataset` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tpn_dataset_save(
    dataset: *const TpnDataset,
    path: *const c_char,
) -> TpnStatus {
    let Some(ds) = (unsafe { dataset.as_ref() }) else {
        return fail_null("dataset");
    };
    let path = match unsafe { read_str(path, "path") } {
        Ok(s) => PathBuf::from(s),
        Err(status) => return status,
    };
    match save_fsds(&ds.inner, &path) {
        Ok(()) => TpnStatus::Ok,
        Err(e) => fail_err(&e),
    }
}

/// Writes the number of classes in the dataset.
///
/// # Safety
/// `dataset` must be a live handle; `out_count` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tpn_dataset_class_count(
    dataset: *const TpnDataset,
    out_count: *mut usize,
) -> TpnStatus {
    let Some(ds) = (unsafe { dataset.as_ref() }) else {
        return fail_null("dataset");
    };
    if out_count.is_null() {
        return fail_null("out_count");
    }
    unsafe { *out_count = ds.inner.classes.len() };
    TpnStatus::Ok
}

/// Writes the flattened example length (product of the example shape).
///
/// # Safety
/// `dataset` must be a live handle; `out_len` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tpn_dataset_example_len(
    dataset: *const TpnDataset,
    out_len: *mut usize,
) -> TpnStatus {
    let Some(ds) = (unsafe { dataset.as_ref() }) else {
        return fail_null("dataset");
    };
    if out_len.is_null() {
        return fail_null("out_len");
    }
    unsafe { *out_len = ds.inner.example_len() };
    TpnStatus::Ok
}

/// Creates a new dataset restricted to one split. `split` is `train`,
/// `val`, `test`, or `all` for an unrestricted copy.
///
/// # Safety
/// `dataset` must be a live handle; `split` must be NUL-terminated;
/// `out_dataset` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tpn_dataset_restrict(
    dataset: *const TpnDataset,
    split: *const c_char,
    out_dataset: *mut *mut TpnDataset,
) -> TpnStatus {
    let Some(ds) = (unsafe { dataset.as_ref() }) else {
        return fail_null("dataset");
    };
    if out_dataset.is_null() {
        return fail_null("out_dataset");
    }
    let split = match unsafe { read_str(split, "split") } {
        Ok(s) => s,
        Err(status) => return status,
    };
    let split = match parse_split(split) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let restricted = ds.inner.restricted(split);
    unsafe { *out_dataset = Box::into_raw(Box::new(TpnDataset { inner: restricted })) };
    TpnStatus::Ok
}

/// Frees a dataset handle. NULL is a no-op.
///
/// # Safety
/// `dataset` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn tpn_dataset_free(dataset: *mut TpnDataset) {
    if !dataset.is_null() {
        drop(unsafe { Box::from_raw(dataset) });
    }
}

/// Loads a checkpoint from a TPNC file.
///
/// # Safety
/// `path` must be NUL-terminated; `out_checkpoint` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn tpn_checkpoint_load(
    path: *const c_char,
    out_checkpoint: *mut *mut TpnCheckpoint,
) -> TpnStatus {
    if out_checkpoint.is_null() {
        return fail_null("out_checkpoint");
    }
    let path = match unsafe { read_str(path, "path") } {
        Ok(s) => PathBuf::from(s),
        Err(status) => return status,
    };
    match Checkpoint::load(&path) {
        Ok(ck) => {
            unsafe { *out_checkpoint = Box::into_raw(Box::new(TpnCheckpoint { inner: ck })) };
            TpnStatus::Ok
        }
        Err(e) => fail_err(&e),
    }
}

/// Saves a checkpoint as a TPNC file.
///
/// # Safety
/// `checkpoint` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tpn_checkpoint_save(
    checkpoint: *const TpnCheckpoint,
    path: *const c_char,
) -> TpnStatus {
    let Some(ck) = (unsafe { checkpoint.as_ref() }) else {
        return fail_null("checkpoint");
    };
    let path = match unsafe { read_str(path, "path") } {
        Ok(s) => PathBuf::from(s),
        Err(status) => return status,
    };
    match ck.inner.save(&path) {
        Ok(()) => TpnStatus::Ok,
        Err(e) => fail_err(&e),
    }
}

/// Writes the number of training episodes the checkpoint has seen.
///
/// # Safety
/// `checkpoint` must be a live handle; `out_episodes` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn tpn_checkpoint_episodes(
    checkpoint: *const TpnCheckpoint,
    out_episodes: *mut u64,
) -> TpnStatus {
    let Some(ck) = (unsafe { checkpoint.as_ref() }) else {
        return fail_null("checkpoint");
    };
    if out_episodes.is_null() {
        return fail_null("out_episodes");
    }
    unsafe { *out_episodes = ck.inner.episodes_seen };
    TpnStatus::Ok
}

/// Writes the total scalar parameter count of the checkpoint's model.
///
/// # Safety
/// `checkpoint` must be a live handle; `out_count` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn tpn_checkpoint_param_count(
    checkpoint: *const TpnCheckpoint,
    out_count: *mut usize,
) -> TpnStatus {
    let Some(ck) = (unsafe { checkpoint.as_ref() }) else {
        return fail_null("checkpoint");
    };
    if out_count.is_null() {
        return fail_null("out_count");
    }
    unsafe { *out_count = ck.inner.params.param_count() };
    TpnStatus::Ok
}

/// Returns the checkpoint's canonical config text as a NUL-terminated
/// string owned by the caller. Free it with `tpn_string_free`.
///
/// # Safety
/// `checkpoint` must be a live handle; `out_text` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn tpn_checkpoint_config(
    checkpoint: *const TpnCheckpoint,
    out_text: *mut *mut c_char,
) -> TpnStatus {
    let Some(ck) = (unsafe { checkpoint.as_ref() }) else {
        return fail_null("checkpoint");
    };
    if out_text.is_null() {
        return fail_null("out_text");
    }
    let owned = CString::new(ck.inner.config_text.replace('\0', "?")).unwrap_or_default();
    unsafe { *out_text = owned.into_raw() };
    TpnStatus::Ok
}

/// Frees a string returned by this library. NULL is a no-op.
///
/// # Safety
/// `text` must be NULL or a string from this library not freed before.
#[no_mangle]
pub unsafe extern "C" fn tpn_string_free(text: *mut c_char) {
    if !text.is_null() {
        drop(unsafe { CString::from_raw(text) });
    }
}

/// Frees a checkpoint handle. NULL is a no-op.
///
/// # Safety
/// `checkpoint` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn tpn_checkpoint_free(checkpoint: *mut TpnCheckpoint) {
    if !checkpoint.is_null() {
        drop(unsafe { Box::from_raw(checkpoint) });
    }
}

/// Trains a model on one split of a dataset and returns the final
/// checkpoint. `config` is config text (`key = value` lines, empty string
/// for all defaults); `split` selects the training classes. Training is
/// deterministic for a given config and dataset.
///
/// # Safety
/// `dataset` must be a live handle; `split` and `config` must be
/// NUL-terminated; `out_checkpoint` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tpn_train(
    dataset: *const TpnDataset,
    split: *const c_char,
    config: *const c_char,
    out_checkpoint: *mut *mut TpnCheckpoint,
) -> TpnStatus {
    let Some(ds) = (unsafe { dataset.as_ref() }) else {
        return fail_null("dataset");
    };
    if out_checkpoint.is_null() {
        return fail_null("out_checkpoint");
    }
    let split = match unsafe { read_str(split, "split") } {
        Ok(s) => s,
        Err(status) => return status,
    };
    let split = match parse_split(split) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let config = match unsafe { read_str(config, "config") } {
        Ok(s) => s,
        Err(status) => return status,
    };
    let cfg = match TrainConfig::from_text(config) {
        Ok(c) => c,
        Err(e) => return fail_err(&e),
    };
    let restricted = ds.inner.restricted(split);
    match train(&restricted, &cfg, None, None, &mut |_| {}) {
        Ok(ck) => {
            unsafe { *out_checkpoint = Box::into_raw(Box::new(TpnCheckpoint { inner: ck })) };
            TpnStatus::Ok
        }
        Err(e) => fail_err(&e),
    }
}

/// Evaluates a checkpoint on a dataset: `episodes` N-way K-shot episodes
/// with `t_query` queries each, classified by joint closed-form
/// propagation. Writes mean query accuracy and its 95% confidence
/// half-width. Deterministic for a given seed.
///
/// # Safety
/// `checkpoint` and `dataset` must be live handles; `out_mean` and
/// `out_ci95` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tpn_eval(
    checkpoint: *const TpnCheckpoint,
    dataset: *const TpnDataset,
    n_way: usize,
    k_shot: usize,
    t_query: usize,
    episodes: usize,
    seed: u64,
    out_mean: *mut f64,
    out_ci95: *mut f64,
) -> TpnStatus {
    let Some(ck) = (unsafe { checkpoint.as_ref() }) else {
        return fail_null("checkpoint");
    };
    let Some(ds) = (unsafe { dataset.as_ref() }) else {
        return fail_null("dataset");
    };
    if out_mean.is_null() {
        return fail_null("out_mean");
    }
    if out_ci95.is_null() {
        return fail_null("out_ci95");
    }
    match eval(&ck.inner, &ds.inner, n_way, k_shot, t_query, episodes, seed) {
        Ok(report) => {
            unsafe {
                *out_mean = report.mean;
                *out_ci95 = report.ci95;
            }
            TpnStatus::Ok
        }
        Err(e) => fail_err(&e),
    }
}
