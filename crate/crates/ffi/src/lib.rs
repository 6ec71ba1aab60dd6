//! C interface to the `drrho` library.
//!
//! Objects cross the boundary as opaque handles that the caller frees with the
//! matching `*_free` function. Every fallible call returns a [`DrrhoStatus`];
//! on failure, [`drrho_last_error`] returns a description valid until the next
//! failing call on the same thread. Strings returned by the library are freed
//! with [`drrho_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use ndarray::Array2;

use drrho::contrastive::{global_objective, Over};
use drrho::data::{build_reference_cache, generate_synthetic, EmbeddingCache, PairedDataset, SyntheticSpec};
use drrho::encoder::{SimilarityMatrix, TwoTowerModel};
use drrho::experiments::{fit_scaling_law, recall_at_1, ScalingPoint};
use drrho::risk::{chi2_dro_risk, cvar_topk, kl_constrained_risk, kl_regularized_risk, LossVector};
use drrho::trainer::{evaluate_recall, train, TrainConfig};
use drrho::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrrhoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Checksum = 6,
    Numeric = 7,
    State = 8,
    Panic = 9,
}

/// Paired dataset handle.
pub struct DrrhoDataset(PairedDataset);

/// Two-tower model handle.
pub struct DrrhoModel(TwoTowerModel);

/// Reference embedding cache handle.
pub struct DrrhoCache(EmbeddingCache);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn status_of(e: &Error) -> DrrhoStatus {
    match e {
        Error::Config { .. } => DrrhoStatus::Config,
        Error::Argument(_) => DrrhoStatus::InvalidArgument,
        Error::DegenerateEmbedding { .. } | Error::Solver(_) | Error::NonFinite(_) => DrrhoStatus::Numeric,
        Error::State(_) => DrrhoStatus::State,
        Error::Io { .. } => DrrhoStatus::Io,
        Error::Checksum { .. } => DrrhoStatus::Checksum,
        Error::BadMagic { .. } | Error::Version { .. } | Error::Truncated(_) | Error::Format(_) => {
            DrrhoStatus::Format
        }
        Error::Json(_) | Error::Csv(_) => DrrhoStatus::Format,
    }
}

enum Failure {
    Lib(Error),
    Status(DrrhoStatus, String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> DrrhoStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => DrrhoStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            DrrhoStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(DrrhoStatus::NullPointer, format!("{what} is null"))
}

unsafe fn reference<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(DrrhoStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn floats<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn square(p: *const f64, n: usize, what: &str) -> Result<SimilarityMatrix, Failure> {
    let values = floats(p, n * n, what)?.to_vec();
    let array = Array2::from_shape_vec((n, n), values)
        .map_err(|e| Failure::Status(DrrhoStatus::InvalidArgument, e.to_string()))?;
    Ok(SimilarityMatrix::new(array)?)
}

/// Description of the last failure on this thread, or an empty string.
#[no_mangle]
pub extern "C" fn drrho_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Free a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn drrho_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generate a synthetic dataset.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn drrho_dataset_generate(
    n: usize,
    d_x: usize,
    d_y: usize,
    d_latent: usize,
    noise_sigma: f64,
    test_fraction: f64,
    seed: u64,
    out: *mut *mut DrrhoDataset,
) -> DrrhoStatus {
    guard(|| {
        let ds = generate_synthetic(&SyntheticSpec {
            n,
            d_x,
            d_y,
            d_latent,
            noise_sigma,
            test_fraction,
            seed,
        })?;
        write_out(out, Box::into_raw(Box::new(DrrhoDataset(ds))), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn drrho_dataset_load(path: *const c_char, out: *mut *mut DrrhoDataset) -> DrrhoStatus {
    guard(|| {
        let ds = PairedDataset::load(&path_arg(path)?)?;
        write_out(out, Box::into_raw(Box::new(DrrhoDataset(ds))), "out")
    })
}

/// # Safety
/// `dataset` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn drrho_dataset_save(dataset: *const DrrhoDataset, path: *const c_char) -> DrrhoStatus {
    guard(|| Ok(reference(dataset, "dataset")?.0.save(&path_arg(path)?)?))
}

/// Number of pairs, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn drrho_dataset_len(dataset: *const DrrhoDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn drrho_dataset_free(dataset: *mut DrrhoDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Randomly initialized model with `d`-dimensional embeddings.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn drrho_model_random(
    d: usize,
    d_x: usize,
    d_y: usize,
    tau: f64,
    seed: u64,
    out: *mut *mut DrrhoModel,
) -> DrrhoStatus {
    guard(|| {
        let m = TwoTowerModel::random(d, d_x, d_y, tau, seed)?;
        write_out(out, Box::into_raw(Box::new(DrrhoModel(m))), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn drrho_model_load(path: *const c_char, out: *mut *mut DrrhoModel) -> DrrhoStatus {
    guard(|| {
        let m = TwoTowerModel::load(&path_arg(path)?)?;
        write_out(out, Box::into_raw(Box::new(DrrhoModel(m))), "out")
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn drrho_model_save(model: *const DrrhoModel, path: *const c_char) -> DrrhoStatus {
    guard(|| Ok(reference(model, "model")?.0.save(&path_arg(path)?)?))
}

/// Current temperature of the model, or NaN for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn drrho_model_tau(model: *const DrrhoModel) -> f64 {
    model.as_ref().map_or(f64::NAN, |m| m.0.tau)
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn drrho_model_free(model: *mut DrrhoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embed every pair of `dataset` with `model`.
///
/// # Safety
/// Handles must be live and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn drrho_cache_build(
    dataset: *const DrrhoDataset,
    model: *const DrrhoModel,
    out: *mut *mut DrrhoCache,
) -> DrrhoStatus {
    guard(|| {
        let c = build_reference_cache(&reference(dataset, "dataset")?.0, &reference(model, "model")?.0)?;
        write_out(out, Box::into_raw(Box::new(DrrhoCache(c))), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn drrho_cache_load(path: *const c_char, out: *mut *mut DrrhoCache) -> DrrhoStatus {
    guard(|| {
        let c = EmbeddingCache::load(&path_arg(path)?)?;
        write_out(out, Box::into_raw(Box::new(DrrhoCache(c))), "out")
    })
}

/// # Safety
/// `cache` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn drrho_cache_save(cache: *const DrrhoCache, path: *const c_char) -> DrrhoStatus {
    guard(|| Ok(reference(cache, "cache")?.0.save(&path_arg(path)?)?))
}

/// # Safety
/// `cache` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn drrho_cache_free(cache: *mut DrrhoCache) {
    if !cache.is_null() {
        drop(Box::from_raw(cache));
    }
}

/// Train with a JSON configuration (missing keys take their defaults).
/// `cache` may be null for methods that need no reference. On success
/// `out_model` receives the trained model and, when non-null, `out_report`
/// receives the report JSON.
///
/// # Safety
/// Handles must be live or null as documented; `config_json` must be a
/// NUL-terminated string; out-pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn drrho_train(
    dataset: *const DrrhoDataset,
    cache: *const DrrhoCache,
    config_json: *const c_char,
    out_model: *mut *mut DrrhoModel,
    out_report: *mut *mut c_char,
) -> DrrhoStatus {
    guard(|| {
        let ds = &reference(dataset, "dataset")?.0;
        let cache = cache.as_ref().map(|c| &c.0);
        if config_json.is_null() {
            return Err(null("config_json"));
        }
        let text = CStr::from_ptr(config_json)
            .to_str()
            .map_err(|_| Failure::Status(DrrhoStatus::InvalidArgument, "config is not valid UTF-8".into()))?;
        let config: TrainConfig = serde_json::from_str(text)
            .map_err(|e| Failure::Status(DrrhoStatus::Config, format!("invalid configuration: {e}")))?;
        if out_model.is_null() {
            return Err(null("out_model"));
        }
        let result = train(&config, ds, cache)?;
        if !out_report.is_null() {
            let json = CString::new(result.report.to_json()?).expect("JSON has no interior NUL");
            out_report.write(json.into_raw());
        }
        out_model.write(Box::into_raw(Box::new(DrrhoModel(result.state.model))));
        Ok(())
    })
}

/// Test-split recall@1 of `model` on `dataset`.
///
/// # Safety
/// Handles must be live and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn drrho_evaluate(
    model: *const DrrhoModel,
    dataset: *const DrrhoDataset,
    out: *mut f64,
) -> DrrhoStatus {
    guard(|| {
        let ds = &reference(dataset, "dataset")?.0;
        let r = evaluate_recall(&reference(model, "model")?.0, ds, &ds.test_indices())?;
        write_out(out, r, "out")
    })
}

/// Mean of the `k` largest of `len` losses.
///
/// # Safety
/// `losses` must point to `len` doubles and `out` be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn drrho_cvar_topk(losses: *const f64, len: usize, k: usize, out: *mut f64) -> DrrhoStatus {
    guard(|| {
        let l = LossVector::new(floats(losses, len, "losses")?.to_vec())?;
        write_out(out, cvar_topk(&l, k)?, "out")
    })
}

/// # Safety
/// `losses` must point to `len` doubles and `out` be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn drrho_kl_regularized_risk(
    losses: *const f64,
    len: usize,
    tau: f64,
    out: *mut f64,
) -> DrrhoStatus {
    guard(|| {
        let l = LossVector::new(floats(losses, len, "losses")?.to_vec())?;
        write_out(out, kl_regularized_risk(&l, tau)?, "out")
    })
}

/// Risk and optimal temperature of the KL-constrained problem with radius
/// `rho / n`. `out_tau` may be null.
///
/// # Safety
/// `losses` must point to `len` doubles; `out_risk` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn drrho_kl_constrained_risk(
    losses: *const f64,
    len: usize,
    rho: f64,
    n: usize,
    out_risk: *mut f64,
    out_tau: *mut f64,
) -> DrrhoStatus {
    guard(|| {
        let l = LossVector::new(floats(losses, len, "losses")?.to_vec())?;
        let (risk, tau) = kl_constrained_risk(&l, rho, n)?;
        write_out(out_risk, risk, "out_risk")?;
        if !out_tau.is_null() {
            out_tau.write(tau);
        }
        Ok(())
    })
}

/// χ²-constrained risk of `len` losses. When `out_weights` is non-null it
/// receives the `len` optimal weights.
///
/// # Safety
/// `losses` must point to `len` doubles; `out_risk` must be valid for
/// writes; `out_weights` must be null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn drrho_chi2_dro_risk(
    losses: *const f64,
    len: usize,
    rho: f64,
    out_risk: *mut f64,
    out_weights: *mut f64,
) -> DrrhoStatus {
    guard(|| {
        let l = LossVector::new(floats(losses, len, "losses")?.to_vec())?;
        let (risk, weights) = chi2_dro_risk(&l, rho, len)?;
        write_out(out_risk, risk, "out_risk")?;
        if !out_weights.is_null() {
            ptr::copy_nonoverlapping(weights.as_ptr(), out_weights, len);
        }
        Ok(())
    })
}

/// Global contrastive objective of an `n × n` row-major similarity matrix.
/// `reference` may be null for the reference-free objective. With
/// `exclude_anchor` the positive pair is left out of each anchor's set.
///
/// # Safety
/// `target` (and `reference` when non-null) must point to `n * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn drrho_global_objective(
    target: *const f64,
    reference_sim: *const f64,
    n: usize,
    tau: f64,
    exclude_anchor: bool,
    out: *mut f64,
) -> DrrhoStatus {
    guard(|| {
        let t = square(target, n, "target")?;
        let r = if reference_sim.is_null() {
            None
        } else {
            Some(square(reference_sim, n, "reference")?)
        };
        let over = if exclude_anchor { Over::ExcludeAnchor } else { Over::FullSet };
        write_out(out, global_objective(&t, r.as_ref(), tau, over)?, "out")
    })
}

/// Retrieval recall@1 of an `n × n` row-major similarity matrix.
///
/// # Safety
/// `sim` must point to `n * n` doubles and `out` be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn drrho_recall_at_1(sim: *const f64, n: usize, out: *mut f64) -> DrrhoStatus {
    guard(|| write_out(out, recall_at_1(&square(sim, n, "sim")?)?, "out"))
}

/// Least-squares fit of `error = alpha * compute^beta` in log space.
///
/// # Safety
/// `compute` and `error` must point to `len` doubles; outputs must be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn drrho_fit_scaling_law(
    compute: *const f64,
    error: *const f64,
    len: usize,
    out_alpha: *mut f64,
    out_beta: *mut f64,
    out_residual: *mut f64,
) -> DrrhoStatus {
    guard(|| {
        let c = floats(compute, len, "compute")?;
        let e = floats(error, len, "error")?;
        let points = c
            .iter()
            .zip(e)
            .map(|(&c, &e)| ScalingPoint::new(c, e))
            .collect::<Result<Vec<_>, _>>()?;
        let fit = fit_scaling_law(&points)?;
        write_out(out_alpha, fit.alpha, "out_alpha")?;
        write_out(out_beta, fit.beta, "out_beta")?;
        write_out(out_residual, fit.residual, "out_residual")
    })
}
