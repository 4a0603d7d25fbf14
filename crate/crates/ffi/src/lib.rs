//! C interface to trained HeTVAE checkpoints.
//!
//! Every function returns a [`HetvaeStatus`]; on failure the message is
//! available from [`hetvae_last_error`] on the same thread. Handles are
//! opaque and must be released with [`hetvae_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hetvae::checkpoint::Checkpoint;
use hetvae::data::{Channel, IrregularSeries};
use hetvae::eval::interpolation_trace;
use hetvae::rng::{stream, streams};
use hetvae::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HetvaeStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Numerical = 4,
    Io = 5,
    Dimension = 6,
    Contract = 7,
    Panic = 8,
}

impl From<&Error> for HetvaeStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => HetvaeStatus::Config,
            Error::Data(_) | Error::Json(_) => HetvaeStatus::Data,
            Error::Numerical(_) | Error::EmptyReduction { .. } => HetvaeStatus::Numerical,
            Error::Io { .. } => HetvaeStatus::Io,
            Error::Dimension(_) => HetvaeStatus::Dimension,
            Error::Contract(_) => HetvaeStatus::Contract,
        }
    }
}

/// A loaded checkpoint.
pub struct HetvaeModel {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn guard(f: impl FnOnce() -> Result<(), (HetvaeStatus, String)>) -> HetvaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            HetvaeStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HetvaeStatus::Panic
        }
    }
}

fn fail(e: Error) -> (HetvaeStatus, String) {
    (HetvaeStatus::from(&e), e.to_string())
}

fn null(what: &str) -> (HetvaeStatus, String) {
    (HetvaeStatus::NullPointer, format!("`{what}` is null"))
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn hetvae_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hetvae_model_load(path: *const c_char, out: *mut *mut HetvaeModel) -> HetvaeStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (HetvaeStatus::Config, "path is not UTF-8".to_string()))?;
        let ckpt = Checkpoint::load(path).map_err(fail)?;
        *out = Box::into_raw(Box::new(HetvaeModel { ckpt }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`hetvae_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hetvae_model_free(model: *mut HetvaeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of input dimensions `D`.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn hetvae_model_input_dim(model: *const HetvaeModel, out: *mut usize) -> HetvaeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.ckpt.model.config.input_dim;
        Ok(())
    })
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (HetvaeStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Conditions on observations given as parallel arrays `(times[i], dims[i],
/// values[i])` and writes the mixture mean and standard deviation at each
/// query time to `out_mean` / `out_std`, row-major `[n_query, D]`. Times and
/// values are in the original data units.
///
/// # Safety
/// Input arrays must hold `n_obs` (resp. `n_query`) elements and outputs
/// `n_query · D` elements.
#[no_mangle]
pub unsafe extern "C" fn hetvae_interpolate(
    model: *const HetvaeModel,
    n_obs: usize,
    times: *const f64,
    dims: *const usize,
    values: *const f64,
    n_query: usize,
    query_times: *const f64,
    samples: usize,
    seed: u64,
    out_mean: *mut f64,
    out_std: *mut f64,
) -> HetvaeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let times = slice(times, n_obs, "times")?;
        let dims = slice(dims, n_obs, "dims")?;
        let values = slice(values, n_obs, "values")?;
        let queries = slice(query_times, n_query, "query_times")?;
        let d = m.ckpt.model.config.input_dim;
        if n_query > 0 && (out_mean.is_null() || out_std.is_null()) {
            return Err(null("output buffer"));
        }
        if samples == 0 {
            return Err((HetvaeStatus::Config, "samples must be positive".into()));
        }
        let mut channels = vec![Channel::default(); d];
        for i in 0..n_obs {
            let c = channels.get_mut(dims[i]).ok_or_else(|| {
                (HetvaeStatus::Dimension, format!("observation {i} has dimension {} of {d}", dims[i]))
            })?;
            c.times.push(times[i]);
            c.values.push(values[i]);
        }
        let series = IrregularSeries::new("ffi", channels.iter().map(Channel::sorted).collect());
        series.validate().map_err(fail)?;
        let norm = &m.ckpt.normalizer;
        let series = norm.apply(&series).map_err(fail)?;
        let grid: Vec<f64> = queries.iter().map(|&t| norm.time(t)).collect();
        let mut rng = stream(seed, streams::EVAL_NOISE);
        let trace = interpolation_trace(&m.ckpt.model, &series, &grid, samples, &mut rng).map_err(fail)?;
        let mean = std::slice::from_raw_parts_mut(out_mean, n_query * d);
        let std = std::slice::from_raw_parts_mut(out_std, n_query * d);
        for q in 0..n_query {
            for j in 0..d {
                let (mu, sd) = trace.get(q, j);
                mean[q * d + j] = norm.value_inverse(j, mu);
                std[q * d + j] = sd * norm.std[j];
            }
        }
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hetvae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
