//! C ABI for `wrapacc`.
//!
//! Every function returns a [`WaStatus`]; results go through out-pointers.
//! On failure the message is kept per thread and can be read with
//! [`wa_last_error_message`]. Models are opaque [`WaModel`] handles created by
//! [`wa_model_load`] and released with [`wa_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use wrapacc::cyclic::{CyclicKind, CyclicSpec, Slope};
use wrapacc::fxp;
use wrapacc::kernels::{gemm_raw, AccMode};
use wrapacc::netgraph::{self, ModelManifest};
use wrapacc::packing::carry_count;
use wrapacc::Error;

/// Status codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfRange = 3,
    Shape = 4,
    Unsupported = 5,
    Io = 6,
    Format = 7,
    Panic = 8,
}

/// A loaded model.
pub struct WaModel {
    model: ModelManifest,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> WaStatus {
    match e {
        Error::OutOfRange { .. } | Error::WeightRange(_) => WaStatus::OutOfRange,
        Error::LengthMismatch { .. } | Error::Shape(_) | Error::EmptyBatch => WaStatus::Shape,
        Error::Unsupported(_) => WaStatus::Unsupported,
        Error::Io { .. } => WaStatus::Io,
        Error::Checksum { .. } | Error::Version { .. } | Error::Format(_) => WaStatus::Format,
        _ => WaStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), WaStatus>) -> WaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WaStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            WaStatus::Panic
        }
    }
}

fn fail(e: Error) -> WaStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn null(what: &str) -> WaStatus {
    set_error(format!("{what} is null"));
    WaStatus::NullPointer
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], WaStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], WaStatus> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, WaStatus> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, WaStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        WaStatus::InvalidArgument
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn wa_last_error_message(buf: *mut c_char, len: usize) -> usize {
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

/// Two's-complement wrap of `z` into `bits` bits.
///
/// # Safety
/// `result` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wa_wrap(z: i64, bits: u32, result: *mut i64) -> WaStatus {
    guard(|| {
        let r = out(result, "result")?;
        fxp::AccumulatorSpec::new(bits).map_err(fail)?;
        *r = fxp::wrap(z, bits);
        Ok(())
    })
}

/// Dot product of two `n`-vectors accumulated in a wrapping `bits`-bit register.
///
/// # Safety
/// `x` and `w` must point to `n` values; `result` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wa_wrapped_dot(x: *const i32, w: *const i32, n: usize, bits: u32, result: *mut i64) -> WaStatus {
    guard(|| {
        let (x, w) = (slice(x, n, "x")?, slice(w, n, "w")?);
        let r = out(result, "result")?;
        *r = fxp::wrapped_dot(x, w, bits).map_err(fail)?;
        Ok(())
    })
}

/// Smooth-modulo activation with transition slope `k` (`INFINITY` for the
/// plain modulo) on a `bits`-bit accumulator.
///
/// # Safety
/// `result` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wa_cyclic_apply(z: f64, bits: u32, k: f64, result: *mut f64) -> WaStatus {
    guard(|| {
        let r = out(result, "result")?;
        let slope = if k == f64::INFINITY {
            Slope::Infinite
        } else {
            Slope::finite(k).map_err(fail)?
        };
        let spec = CyclicSpec::new(bits, slope, CyclicKind::SmoothModulo).map_err(fail)?;
        *r = spec.apply(z);
        Ok(())
    })
}

/// Carries produced when the `n` values are summed in a `bits`-bit register
/// with every carry folded back in.
///
/// # Safety
/// `v` must point to `n` values; `carries` and `residue` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wa_carry_count(v: *const i64, n: usize, bits: u32, carries: *mut u64, residue: *mut u64) -> WaStatus {
    guard(|| {
        let v = slice(v, n, "v")?;
        let c = out(carries, "carries")?;
        let r = out(residue, "residue")?;
        let cc = carry_count(v, bits).map_err(fail)?;
        *c = cc.carries;
        *r = cc.residue;
        Ok(())
    })
}

/// `out[m x n] = a[m x k] * b[k x n]` under an accumulator mode string such
/// as `exact32`, `wrapped:8` or `packed_isolated:8:64`.
///
/// # Safety
/// `a`, `b` and `result` must point to `m*k`, `k*n` and `m*n` values.
#[no_mangle]
pub unsafe extern "C" fn wa_gemm(
    a: *const i32,
    b: *const i32,
    m: usize,
    k: usize,
    n: usize,
    mode: *const c_char,
    result: *mut i64,
) -> WaStatus {
    guard(|| {
        let mode: AccMode = string(mode, "mode")?.parse().map_err(fail)?;
        let (a, b) = (slice(a, m * k, "a")?, slice(b, k * n, "b")?);
        let dst = slice_mut(result, m * n, "result")?;
        let c = gemm_raw(a, b, m, k, n, mode).map_err(fail)?;
        dst.copy_from_slice(&c.data);
        Ok(())
    })
}

/// Loads a model manifest (file or directory) into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `model` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wa_model_load(path: *const c_char, model: *mut *mut WaModel) -> WaStatus {
    guard(|| {
        let dst = out(model, "model")?;
        *dst = ptr::null_mut();
        let path = string(path, "path")?;
        let m = netgraph::load_model(Path::new(path)).map_err(fail)?;
        *dst = Box::into_raw(Box::new(WaModel { model: m }));
        Ok(())
    })
}

/// Releases a handle from [`wa_model_load`]; null is ignored.
///
/// # Safety
/// `model` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wa_model_free(model: *mut WaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input features and output classes of a model.
///
/// # Safety
/// `model` must be a live handle; the out-pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn wa_model_dims(model: *const WaModel, inputs: *mut usize, outputs: *mut usize) -> WaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let (i, o) = (out(inputs, "inputs")?, out(outputs, "outputs")?);
        *i = m.model.in_features();
        *o = m
            .model
            .layers
            .last()
            .map(|l| l.out_features())
            .transpose()
            .map_err(fail)?
            .unwrap_or(0);
        Ok(())
    })
}

/// Runs `batch` rows of `input` through the model under `mode`, writing
/// `batch * outputs` logits.
///
/// # Safety
/// `model` must be a live handle; `input` and `logits` must hold
/// `batch * inputs` and `batch * outputs` values.
#[no_mangle]
pub unsafe extern "C" fn wa_model_infer(
    model: *const WaModel,
    input: *const f64,
    batch: usize,
    mode: *const c_char,
    logits: *mut f64,
) -> WaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let mode: AccMode = string(mode, "mode")?.parse().map_err(fail)?;
        let features = m.model.in_features();
        let x = slice(input, batch * features, "input")?;
        let t = fxp::RealTensor::new(vec![batch, features], x.to_vec()).map_err(fail)?;
        let y = netgraph::forward(&m.model, &t, mode).map_err(fail)?;
        let dst = slice_mut(logits, y.values.len(), "logits")?;
        dst.copy_from_slice(&y.values);
        Ok(())
    })
}
