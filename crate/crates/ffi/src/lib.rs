//! C interface to the thermal solver and trained predictors.
//!
//! Every function returns an [`FsaStatus`]. On failure a message is kept
//! per thread and can be copied out with [`fsa_last_error`]. Handles are
//! opaque; each `*_open`/`*_new` has a matching `*_free` that accepts null.
//!
//! Array arguments use the crate's row-major layouts: raw inputs are
//! `[4, R, C, 8]`, temperature fields `[4, R, C]` in kelvin above ambient.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fsaheat::checkpoint::Checkpoint;
use fsaheat::dataset::{make_sample, DatasetSpec, NUM_CHANNELS};
use fsaheat::harness::TrainConfig;
use fsaheat::net::FsaHeatNet;
use fsaheat::thermal::NUM_LAYERS;
use fsaheat::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FsaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Config = 5,
    Numerical = 6,
    BufferSize = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into().into_bytes());
}

fn status_of(e: &Error) -> FsaStatus {
    match e {
        Error::Io(_) => FsaStatus::Io,
        Error::Checkpoint(_) => FsaStatus::Checkpoint,
        Error::InvalidConfig(_) | Error::Toml(_) => FsaStatus::Config,
        Error::NotConverged { .. }
        | Error::NonFinite(_)
        | Error::NonFiniteWeight { .. }
        | Error::NonFiniteLoss { .. } => FsaStatus::Numerical,
        Error::SampleFailed { source, .. } => status_of(source),
        _ => FsaStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (FsaStatus, String)>) -> FsaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FsaStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FsaStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (FsaStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FsaStatus, String) {
    (FsaStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (FsaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (FsaStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> Result<&'a mut [f64], (FsaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    if len != need {
        return Err((FsaStatus::BufferSize, format!("{what} holds {len} values, expected {need}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
/// message length without the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fsa_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Sample generator: layouts, input channels and solver ground truth.
pub struct FsaOracle {
    spec: DatasetSpec,
}

/// Creates a generator from run-configuration TOML text (its `[dataset]`
/// section is used; the empty string selects defaults).
///
/// # Safety
/// `config_toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fsa_oracle_new(config_toml: *const c_char, out: *mut *mut FsaOracle) -> FsaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = TrainConfig::from_toml(str_arg(config_toml, "config_toml")?).map_err(lib_err)?;
        cfg.dataset.validate().map_err(lib_err)?;
        *out = Box::into_raw(Box::new(FsaOracle { spec: cfg.dataset }));
        Ok(())
    })
}

/// # Safety
/// `oracle` must be null or a handle from [`fsa_oracle_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fsa_oracle_free(oracle: *mut FsaOracle) {
    if !oracle.is_null() {
        drop(Box::from_raw(oracle));
    }
}

/// Grid size of generated samples.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fsa_oracle_grid(oracle: *const FsaOracle, rows: *mut usize, cols: *mut usize) -> FsaStatus {
    guard(|| {
        let o = oracle.as_ref().ok_or_else(|| null("oracle"))?;
        if rows.is_null() || cols.is_null() {
            return Err(null("rows/cols"));
        }
        *rows = o.spec.stack.rows;
        *cols = o.spec.stack.cols;
        Ok(())
    })
}

/// Generates and solves the sample for `seed`. `inputs` receives the raw
/// channels (`4·R·C·8` values), `theta` the temperature rise (`4·R·C`).
///
/// # Safety
/// `oracle` must be a live handle; the buffers must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn fsa_oracle_sample(
    oracle: *const FsaOracle,
    seed: u64,
    inputs: *mut f64,
    inputs_len: usize,
    theta: *mut f64,
    theta_len: usize,
) -> FsaStatus {
    guard(|| {
        let o = oracle.as_ref().ok_or_else(|| null("oracle"))?;
        let cells = NUM_LAYERS * o.spec.stack.rows * o.spec.stack.cols;
        let inputs = out_slice(inputs, inputs_len, cells * NUM_CHANNELS, "inputs")?;
        let theta = out_slice(theta, theta_len, cells, "theta")?;
        let s = make_sample(&o.spec, seed).map_err(lib_err)?;
        inputs.copy_from_slice(s.inputs.data());
        theta.copy_from_slice(s.target.data());
        Ok(())
    })
}

/// A trained network with its input normalization.
pub struct FsaPredictor {
    ckpt: Checkpoint,
    net: FsaHeatNet,
}

/// Loads and verifies a checkpoint archive.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fsa_predictor_open(path: *const c_char, out: *mut *mut FsaPredictor) -> FsaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let ckpt = Checkpoint::load(Path::new(path), None).map_err(lib_err)?;
        let net = ckpt.network().map_err(lib_err)?;
        *out = Box::into_raw(Box::new(FsaPredictor { ckpt, net }));
        Ok(())
    })
}

/// # Safety
/// `predictor` must be null or a handle from [`fsa_predictor_open`] not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn fsa_predictor_free(predictor: *mut FsaPredictor) {
    if !predictor.is_null() {
        drop(Box::from_raw(predictor));
    }
}

/// Grid size the predictor was trained on.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fsa_predictor_grid(
    predictor: *const FsaPredictor,
    rows: *mut usize,
    cols: *mut usize,
) -> FsaStatus {
    guard(|| {
        let p = predictor.as_ref().ok_or_else(|| null("predictor"))?;
        if rows.is_null() || cols.is_null() {
            return Err(null("rows/cols"));
        }
        let n = &p.ckpt.manifest.normalization;
        *rows = n.rows;
        *cols = n.cols;
        Ok(())
    })
}

/// Predicts the temperature rise for raw inputs.
///
/// # Safety
/// `predictor` must be a live handle; `inputs` must hold `inputs_len`
/// values and `theta` `theta_len` values.
#[no_mangle]
pub unsafe extern "C" fn fsa_predictor_predict(
    predictor: *const FsaPredictor,
    inputs: *const f64,
    inputs_len: usize,
    theta: *mut f64,
    theta_len: usize,
) -> FsaStatus {
    guard(|| {
        let p = predictor.as_ref().ok_or_else(|| null("predictor"))?;
        let n = &p.ckpt.manifest.normalization;
        let cells = NUM_LAYERS * n.rows * n.cols;
        if inputs.is_null() {
            return Err(null("inputs"));
        }
        if inputs_len != cells * NUM_CHANNELS {
            return Err((
                FsaStatus::BufferSize,
                format!("inputs hold {inputs_len} values, expected {}", cells * NUM_CHANNELS),
            ));
        }
        let theta = out_slice(theta, theta_len, cells, "theta")?;
        let raw = fsaheat::Tensor::from_vec(
            vec![NUM_LAYERS, n.rows, n.cols, NUM_CHANNELS],
            std::slice::from_raw_parts(inputs, inputs_len).to_vec(),
        )
        .map_err(lib_err)?;
        let x = n.stats.standardize(&raw).map_err(lib_err)?;
        let y = p.net.predict(&p.ckpt.params, &x).map_err(lib_err)?;
        for (o, v) in theta.iter_mut().zip(y.data()) {
            *o = v * n.theta_max;
        }
        Ok(())
    })
}
