//! C interface to votacast.
//!
//! Every function returns a [`VcStatus`]. On failure the message is kept per
//! thread and read with [`vc_last_error_message`]. Output buffers are owned by
//! the caller; ensembles are opaque handles released with
//! [`vc_ensemble_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use votacast::config::RunConfig;
use votacast::pipeline::{run_all, run_stage, Stage};
use votacast::seats::{dhondt_allocate, jefferson_allocate};
use votacast::simplex::{softmax, PartyCanon};
use votacast::synthesis::SimulationEnsemble;
use votacast::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VcStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad arguments, configuration or input files.
    InvalidInput = 2,
    NoEligibleParty = 3,
    Numerical = 4,
    /// Sampler convergence or importance-weight checks failed.
    Diagnostic = 5,
    Internal = 6,
    Panic = 7,
}

/// Opaque simulation ensemble.
pub struct VcEnsemble {
    inner: SimulationEnsemble,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> VcStatus {
    match e {
        Error::NoEligibleParty { .. } => VcStatus::NoEligibleParty,
        Error::Numerical(_) | Error::Misconfigured { .. } | Error::UndefinedWeight { .. } => VcStatus::Numerical,
        Error::Diagnostic(_) => VcStatus::Diagnostic,
        e if e.is_validation() => VcStatus::InvalidInput,
        _ => VcStatus::Internal,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VcStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VcStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            VcStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            VcStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Core(Error::InvalidInput(format!("{what} is not valid UTF-8"))))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn vc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// D'Hondt allocation of `contingent` seats among `n` lists.
///
/// # Safety
/// `votes` and `seats_out` must point to `n` elements.
#[no_mangle]
pub unsafe extern "C" fn vc_dhondt_allocate(
    votes: *const f64,
    n: usize,
    contingent: u32,
    threshold: f64,
    seats_out: *mut u32,
) -> VcStatus {
    guard(|| {
        let v = slice(votes, n, "votes")?;
        let out = slice_mut(seats_out, n, "seats_out")?;
        out.copy_from_slice(&dhondt_allocate(v, contingent, threshold)?);
        Ok(())
    })
}

/// Jefferson allocation; also reports the price per seat.
///
/// # Safety
/// `votes` and `seats_out` must point to `n` elements; `price_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn vc_jefferson_allocate(
    votes: *const f64,
    n: usize,
    contingent: u32,
    threshold: f64,
    seats_out: *mut u32,
    price_out: *mut f64,
) -> VcStatus {
    guard(|| {
        let v = slice(votes, n, "votes")?;
        let out = slice_mut(seats_out, n, "seats_out")?;
        let r = jefferson_allocate(v, contingent, threshold)?;
        out.copy_from_slice(&r.seats);
        if !price_out.is_null() {
            *price_out = r.price;
        }
        Ok(())
    })
}

/// Numerically stable softmax of `n` scores.
///
/// # Safety
/// `scores` and `out` must point to `n` elements.
#[no_mangle]
pub unsafe extern "C" fn vc_softmax(scores: *const f64, n: usize, out: *mut f64) -> VcStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let o = slice_mut(out, n, "out")?;
        o.copy_from_slice(softmax(s)?.as_slice());
        Ok(())
    })
}

/// Builds an ensemble from `draws x provinces x parties` local shares,
/// row-major. The last party label is the pivot.
///
/// # Safety
/// `parties` must hold `n_parties` NUL-terminated strings, `provinces` and
/// `electorate` `n_provinces` elements, `local` `n_local` elements. `out`
/// receives a handle to release with `vc_ensemble_free`.
#[no_mangle]
pub unsafe extern "C" fn vc_ensemble_new(
    parties: *const *const c_char,
    n_parties: usize,
    provinces: *const u32,
    electorate: *const f64,
    n_provinces: usize,
    local: *const f64,
    n_local: usize,
    out: *mut *mut VcEnsemble,
) -> VcStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = ptr::null_mut();
        let labels = slice(parties, n_parties, "parties")?
            .iter()
            .map(|&p| str_arg(p, "party label"))
            .collect::<Result<Vec<_>, _>>()?;
        let canon = PartyCanon::with_last_as_pivot(&labels)?;
        let e = SimulationEnsemble::new(
            canon,
            slice(provinces, n_provinces, "provinces")?.to_vec(),
            slice(electorate, n_provinces, "electorate")?.to_vec(),
            slice(local, n_local, "local")?.to_vec(),
        )?;
        *out = Box::into_raw(Box::new(VcEnsemble { inner: e }));
        Ok(())
    })
}

/// Releases an ensemble. Null is ignored.
///
/// # Safety
/// `ensemble` must come from `vc_ensemble_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vc_ensemble_free(ensemble: *mut VcEnsemble) {
    if !ensemble.is_null() {
        drop(Box::from_raw(ensemble));
    }
}

/// Number of draws.
///
/// # Safety
/// `ensemble` must be a live handle; `len_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vc_ensemble_len(ensemble: *const VcEnsemble, len_out: *mut usize) -> VcStatus {
    guard(|| {
        let e = ensemble.as_ref().ok_or(Failure::Null("ensemble"))?;
        let o = len_out.as_mut().ok_or(Failure::Null("len_out"))?;
        *o = e.inner.len();
        Ok(())
    })
}

/// Sets unnormalized log weights, one per draw, and reports the ESS.
///
/// # Safety
/// `log_weights` must point to `n` elements; `ess_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn vc_ensemble_set_log_weights(
    ensemble: *mut VcEnsemble,
    log_weights: *const f64,
    n: usize,
    ess_floor: f64,
    ess_out: *mut f64,
) -> VcStatus {
    guard(|| {
        let e = ensemble.as_mut().ok_or(Failure::Null("ensemble"))?;
        let lw = slice(log_weights, n, "log_weights")?;
        let ess = e.inner.set_log_weights(lw.to_vec(), ess_floor)?;
        if let Some(o) = ess_out.as_mut() {
            *o = ess;
        }
        Ok(())
    })
}

/// Effective sample size of the current weights.
///
/// # Safety
/// `ensemble` must be a live handle; `ess_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vc_ensemble_ess(ensemble: *const VcEnsemble, ess_out: *mut f64) -> VcStatus {
    guard(|| {
        let e = ensemble.as_ref().ok_or(Failure::Null("ensemble"))?;
        *ess_out.as_mut().ok_or(Failure::Null("ess_out"))? = e.inner.ess();
        Ok(())
    })
}

/// Weighted mean national shares, one per party.
///
/// # Safety
/// `out` must point to `n_parties` elements.
#[no_mangle]
pub unsafe extern "C" fn vc_ensemble_weighted_mean(
    ensemble: *const VcEnsemble,
    out: *mut f64,
    n_parties: usize,
) -> VcStatus {
    guard(|| {
        let e = ensemble.as_ref().ok_or(Failure::Null("ensemble"))?;
        let m = e.inner.national_mean();
        if n_parties != m.len() {
            return Err(Error::InvalidInput(format!("ensemble has {} parties, buffer {n_parties}", m.len())).into());
        }
        slice_mut(out, n_parties, "out")?.copy_from_slice(&m);
        Ok(())
    })
}

unsafe fn load_config(config_path: *const c_char, seed: u64, use_seed: bool) -> Result<RunConfig, Failure> {
    let path = str_arg(config_path, "config_path")?;
    let c = RunConfig::load(Path::new(path))?;
    Ok(if use_seed { c.with_seed(seed) } else { c })
}

/// Runs every stage for the configuration file at `config_path`. A nonzero
/// `use_seed` overrides the configured seed with `seed`.
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vc_run_pipeline(config_path: *const c_char, seed: u64, use_seed: i32) -> VcStatus {
    guard(|| {
        let c = load_config(config_path, seed, use_seed != 0)?;
        run_all(&c)?;
        Ok(())
    })
}

/// Runs one stage by its command-line name, e.g. `fit-polls`.
///
/// # Safety
/// `config_path` and `stage` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn vc_run_stage(
    config_path: *const c_char,
    stage: *const c_char,
    seed: u64,
    use_seed: i32,
) -> VcStatus {
    guard(|| {
        let name = str_arg(stage, "stage")?;
        let stage: Stage = name.parse()?;
        let c = load_config(config_path, seed, use_seed != 0)?;
        run_stage(&c, stage)?;
        Ok(())
    })
}
