//! C ABI over `cbs-core`.
//!
//! Objects cross the boundary as opaque handles returned through out-pointers
//! and released with the matching `*_free`. Every fallible call returns
//! a [`CbsStatus`]; on failure a human-readable message is available from
//! [`cbs_last_error_message`] on the same thread until the next failing call.
//! Strings returned to the caller are freed with [`cbs_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cbs_core::baselines::StrategyKind;
use cbs_core::config::RunConfig;
use cbs_core::error::CbsError;
use cbs_core::features::{load_features, FeatureStore};
use cbs_core::gaussian::{kl_divergence, DiagonalGaussian};
use cbs_core::protocol::{run, SessionPlan};
use cbs_core::selection::{self, SelectionParams};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidUtf8 = 3,
    Parse = 4,
    DimensionMismatch = 5,
    NonFinite = 6,
    NotNormalized = 7,
    Budget = 8,
    Io = 9,
    BufferTooSmall = 10,
    Internal = 11,
}

/// Feature matrix with ids `0..rows`.
pub struct CbsFeatureStore(FeatureStore);

/// Ids picked by a selection call, in selection order.
pub struct CbsSelection(Vec<u64>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &CbsError) -> CbsStatus {
    match err {
        CbsError::Parse { .. } | CbsError::Json(_) => CbsStatus::Parse,
        CbsError::DimensionMismatch { .. } => CbsStatus::DimensionMismatch,
        CbsError::NonFiniteValue { .. } => CbsStatus::NonFinite,
        CbsError::NotNormalized | CbsError::ZeroVector(_) => CbsStatus::NotNormalized,
        CbsError::BudgetExceedsPool { .. } | CbsError::ZeroBudget => CbsStatus::Budget,
        CbsError::Io { .. } => CbsStatus::Io,
        CbsError::Session { source, .. } => status_of(source),
        _ => CbsStatus::InvalidArgument,
    }
}

struct Fail(CbsStatus, String);

impl From<CbsError> for Fail {
    fn from(e: CbsError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CbsStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status plus last-error message.
fn guard<F>(f: F) -> CbsStatus
where
    F: FnOnce() -> Result<(), Fail>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CbsStatus::Ok,
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            CbsStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CbsStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn store_arg<'a>(p: *const CbsFeatureStore) -> Result<&'a FeatureStore, Fail> {
    p.as_ref().map(|s| &s.0).ok_or_else(|| null("store"))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Message of the last failed call on this thread, or NULL. Owned by the
/// library; valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cbs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn cbs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a store from a row-major `rows × dim` matrix. Ids are row indices.
///
/// # Safety
/// `data` must point to `rows * dim` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbs_store_from_matrix(
    data: *const f64,
    rows: usize,
    dim: usize,
    out: *mut *mut CbsFeatureStore,
) -> CbsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = rows
            .checked_mul(dim)
            .ok_or_else(|| Fail(CbsStatus::InvalidArgument, "rows * dim overflows".into()))?;
        let data = slice_arg(data, len, "data")?;
        let store = FeatureStore::from_matrix(dim, data, None)?;
        put(out, CbsFeatureStore(store));
        Ok(())
    })
}

/// Loads a features CSV (`id[,label],f0,...`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbs_store_load_csv(
    path: *const c_char,
    out: *mut *mut CbsFeatureStore,
) -> CbsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let store = load_features(Path::new(path))?;
        put(out, CbsFeatureStore(store));
        Ok(())
    })
}

/// Writes a new, L2-normalized copy of `store` to `out`.
///
/// # Safety
/// `store` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbs_store_normalize(
    store: *const CbsFeatureStore,
    out: *mut *mut CbsFeatureStore,
) -> CbsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let normalized = store_arg(store)?.l2_normalize()?;
        put(out, CbsFeatureStore(normalized));
        Ok(())
    })
}

/// Number of rows, or 0 for NULL.
///
/// # Safety
/// `store` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbs_store_len(store: *const CbsFeatureStore) -> usize {
    store.as_ref().map_or(0, |s| s.0.len())
}

/// Feature dimension, or 0 for NULL.
///
/// # Safety
/// `store` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbs_store_dim(store: *const CbsFeatureStore) -> usize {
    store.as_ref().map_or(0, |s| s.0.dim())
}

/// # Safety
/// `store` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cbs_store_free(store: *mut CbsFeatureStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Class-balanced selection of `budget` ids from a normalized store,
/// clustering into `num_classes` groups.
///
/// # Safety
/// `store` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbs_select(
    store: *const CbsFeatureStore,
    num_classes: usize,
    budget: usize,
    seed: u64,
    out: *mut *mut CbsSelection,
) -> CbsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let store = store_arg(store)?;
        let outcome = selection::cbs_select(
            store,
            num_classes,
            budget,
            seed,
            0,
            &SelectionParams::default(),
        )?;
        put(out, CbsSelection(outcome.selection.ids));
        Ok(())
    })
}

/// Number of selected ids, or 0 for NULL.
///
/// # Safety
/// `selection` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbs_selection_len(selection: *const CbsSelection) -> usize {
    selection.as_ref().map_or(0, |s| s.0.len())
}

/// Copies the selected ids into `ids`, which holds `capacity` entries.
///
/// # Safety
/// `selection` must be a live handle; `ids` must point to `capacity`
/// writable `uint64_t`.
#[no_mangle]
pub unsafe extern "C" fn cbs_selection_ids(
    selection: *const CbsSelection,
    ids: *mut u64,
    capacity: usize,
) -> CbsStatus {
    guard(|| {
        let selection = selection.as_ref().ok_or_else(|| null("selection"))?;
        if ids.is_null() {
            return Err(null("ids"));
        }
        if capacity < selection.0.len() {
            return Err(Fail(
                CbsStatus::BufferTooSmall,
                format!("need {} entries, got {capacity}", selection.0.len()),
            ));
        }
        ptr::copy_nonoverlapping(selection.0.as_ptr(), ids, selection.0.len());
        Ok(())
    })
}

/// # Safety
/// `selection` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cbs_selection_free(selection: *mut CbsSelection) {
    if !selection.is_null() {
        drop(Box::from_raw(selection));
    }
}

/// `KL(p || q)` for diagonal Gaussians given as mean and variance arrays of
/// length `dim`. Variances must be positive.
///
/// # Safety
/// All four arrays must hold `dim` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbs_kl_divergence(
    p_mean: *const f64,
    p_var: *const f64,
    q_mean: *const f64,
    q_var: *const f64,
    dim: usize,
    out: *mut f64,
) -> CbsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let gaussian = |mean: &[f64], var: &[f64]| -> Result<DiagonalGaussian, Fail> {
            if var.iter().any(|v| !(*v > 0.0 && v.is_finite()))
                || mean.iter().any(|m| !m.is_finite())
            {
                return Err(Fail(
                    CbsStatus::InvalidArgument,
                    "variances must be positive and finite".into(),
                ));
            }
            Ok(DiagonalGaussian {
                mean: mean.to_vec(),
                var: var.to_vec(),
                count: 1,
            })
        };
        let p = gaussian(
            slice_arg(p_mean, dim, "p_mean")?,
            slice_arg(p_var, dim, "p_var")?,
        )?;
        let q = gaussian(
            slice_arg(q_mean, dim, "q_mean")?,
            slice_arg(q_var, dim, "q_var")?,
        )?;
        *out = kl_divergence(&p, &q)?;
        Ok(())
    })
}

/// Runs the multi-session protocol and writes the report JSON to `out_json`
/// (free with [`cbs_string_free`]). `config_json` may be NULL for defaults.
/// `strategy` is one of `random`, `balanced_random`, `entropy`, `margin`,
/// `coreset`, `cbs`. The store must carry labels.
///
/// # Safety
/// String arguments must be NUL-terminated; `store` must be a live handle;
/// `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbs_simulate_json(
    plan_json: *const c_char,
    store: *const CbsFeatureStore,
    strategy: *const c_char,
    config_json: *const c_char,
    out_json: *mut *mut c_char,
) -> CbsStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let plan = SessionPlan::from_json(str_arg(plan_json, "plan_json")?)?;
        let store = store_arg(store)?;
        let strategy: StrategyKind = str_arg(strategy, "strategy")?
            .parse()
            .map_err(|e: CbsError| Fail(CbsStatus::InvalidArgument, e.to_string()))?;
        let config = if config_json.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_json(str_arg(config_json, "config_json")?)?
        };
        let report = run(&plan, store, strategy, &config)?;
        let text = CString::new(report.to_json()?)
            .map_err(|_| Fail(CbsStatus::Internal, "report contains NUL".into()))?;
        *out_json = text.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cbs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
