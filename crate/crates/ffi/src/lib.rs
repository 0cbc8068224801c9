//! C ABI over the ntscc codec.
//!
//! Every entry point returns an [`NtsccStatus`]; on failure a message for the
//! calling thread is available from [`ntscc_last_error`]. Models are opaque
//! handles created by [`ntscc_model_load`] and released with
//! [`ntscc_model_free`]. Images are interleaved RGB `float` buffers in
//! row-major order with values in [0, 1].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ntscc::channel::ChannelConfig;
use ntscc::checkpoint;
use ntscc::eval::{self, BdMethod, RDCurve};
use ntscc::image::ImageTensor;
use ntscc::jscc::{quantize_rate, QuantizerVariant};
use ntscc::model::NtsccModel;
use ntscc::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NtsccStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    OutOfRange = 4,
    Io = 5,
    Format = 6,
    Internal = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct NtsccModelHandle {
    model: NtsccModel,
    channel: ChannelConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> NtsccStatus {
    match e {
        Error::DimensionMismatch(_)
        | Error::ShapeMismatch { .. }
        | Error::PartitionMismatch(_)
        | Error::MapMismatch(_) => NtsccStatus::DimensionMismatch,
        Error::OutOfRange { .. } | Error::IndexOverflow { .. } => NtsccStatus::OutOfRange,
        Error::InvalidArgument(_) | Error::Config(_) | Error::ZeroPower => {
            NtsccStatus::InvalidArgument
        }
        Error::Io { .. } | Error::Image(_) | Error::Dataset(_) => NtsccStatus::Io,
        Error::Checkpoint(_) | Error::Format(_) | Error::Csv(_) => NtsccStatus::Format,
        _ => NtsccStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), NtsccStatus>) -> NtsccStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NtsccStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("panic inside ntscc".into());
            NtsccStatus::Panic
        }
    }
}

fn lift<T>(r: ntscc::Result<T>) -> Result<T, NtsccStatus> {
    r.map_err(|e| {
        let s = status_of(&e);
        set_error(e.to_string());
        s
    })
}

fn null(what: &str) -> NtsccStatus {
    set_error(format!("{what} is null"));
    NtsccStatus::NullPointer
}

fn invalid(msg: &str) -> NtsccStatus {
    set_error(msg.to_string());
    NtsccStatus::InvalidArgument
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn ntscc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn ntscc_status_string(status: NtsccStatus) -> *const c_char {
    let s: &'static [u8] = match status {
        NtsccStatus::Ok => b"ok\0",
        NtsccStatus::NullPointer => b"null pointer\0",
        NtsccStatus::InvalidArgument => b"invalid argument\0",
        NtsccStatus::DimensionMismatch => b"dimension mismatch\0",
        NtsccStatus::OutOfRange => b"out of range\0",
        NtsccStatus::Io => b"i/o error\0",
        NtsccStatus::Format => b"format error\0",
        NtsccStatus::Internal => b"internal error\0",
        NtsccStatus::Panic => b"panic\0",
    };
    s.as_ptr().cast()
}

/// Loads a checkpoint. On success `*out` receives a handle owned by the caller.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ntscc_model_load(
    path: *const c_char,
    out: *mut *mut NtsccModelHandle,
) -> NtsccStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let ck = lift(checkpoint::load(p))?;
        let model = lift(NtsccModel::new(&ck.store, &ck.arch))?;
        let h = Box::new(NtsccModelHandle {
            model,
            channel: ChannelConfig::awgn(),
        });
        *out = Box::into_raw(h);
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `handle` must come from [`ntscc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ntscc_model_free(handle: *mut NtsccModelHandle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Selects AWGN (`rayleigh = 0`) or block Rayleigh fading (`rayleigh != 0`).
///
/// # Safety
/// `handle` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ntscc_model_set_channel(
    handle: *mut NtsccModelHandle,
    rayleigh: i32,
    block_length: usize,
) -> NtsccStatus {
    guard(|| {
        let h = handle.as_mut().ok_or_else(|| null("handle"))?;
        let mut c = ChannelConfig::awgn();
        if rayleigh != 0 {
            c.kind = ntscc::channel::ChannelKind::RayleighBlock;
            c.block_length = block_length;
        }
        lift(c.validate())?;
        h.channel = c;
        Ok(())
    })
}

/// End-to-end transmission of one image. `height` and `width` must be
/// multiples of 16. Writes the reconstruction (same layout, clamped to
/// [0, 1]) and, if non-null, the channel bandwidth ratio and PSNR.
///
/// # Safety
/// `pixels` and `out_pixels` must hold `height * width * 3` floats.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ntscc_transmit(
    handle: *const NtsccModelHandle,
    pixels: *const f32,
    height: usize,
    width: usize,
    lambda: f64,
    eta: f64,
    snr_db: f64,
    seed: u64,
    out_pixels: *mut f32,
    out_rho: *mut f64,
    out_psnr_db: *mut f64,
) -> NtsccStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if out_pixels.is_null() {
            return Err(null("out_pixels"));
        }
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| invalid("image too large"))?;
        let src = std::slice::from_raw_parts(pixels, n).to_vec();
        let img = lift(ImageTensor::new(height, width, src))?;
        let (out, opts) = lift(eval::transmit(
            &h.model, &img, lambda, eta, snr_db, &h.channel, seed,
        ))?;
        let point = lift(eval::rd_point("ffi", &img, &out, &opts, eta))?;
        let rec = lift(ntscc::Result::Ok(()).and_then(|_| {
            let t = out.x_hat.clamp(0.0, 1.0)?;
            ImageTensor::from_tensor(&t)
        }))?;
        std::slice::from_raw_parts_mut(out_pixels, n).copy_from_slice(rec.pixels());
        if !out_rho.is_null() {
            *out_rho = point.rho;
        }
        if !out_psnr_db.is_null() {
            *out_psnr_db = point.psnr_db;
        }
        Ok(())
    })
}

/// PSNR in dB of two images on [0, 1] (capped at 100 dB).
///
/// # Safety
/// `a` and `b` must hold `height * width * 3` floats.
#[no_mangle]
pub unsafe extern "C" fn ntscc_psnr(
    a: *const f32,
    b: *const f32,
    height: usize,
    width: usize,
    out_db: *mut f64,
) -> NtsccStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out_db.is_null() {
            return Err(null("argument"));
        }
        let n = height * width * 3;
        let ia = lift(ImageTensor::new(
            height,
            width,
            std::slice::from_raw_parts(a, n).to_vec(),
        ))?;
        let ib = lift(ImageTensor::new(
            height,
            width,
            std::slice::from_raw_parts(b, n).to_vec(),
        ))?;
        *out_db = lift(eval::psnr(&ia, &ib))?;
        Ok(())
    })
}

/// BD-rate in percent of a test curve against an anchor (negative = saving).
/// `pchip != 0` selects piecewise-cubic interpolation instead of the cubic fit.
///
/// # Safety
/// Each rate/PSNR array must hold the stated number of doubles.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ntscc_bd_rate(
    anchor_rho: *const f64,
    anchor_psnr: *const f64,
    anchor_len: usize,
    test_rho: *const f64,
    test_psnr: *const f64,
    test_len: usize,
    pchip: i32,
    out_percent: *mut f64,
) -> NtsccStatus {
    guard(|| {
        if anchor_rho.is_null()
            || anchor_psnr.is_null()
            || test_rho.is_null()
            || test_psnr.is_null()
        {
            return Err(null("curve"));
        }
        if out_percent.is_null() {
            return Err(null("out_percent"));
        }
        let curve = |r: *const f64, q: *const f64, n: usize| {
            let r = std::slice::from_raw_parts(r, n);
            let q = std::slice::from_raw_parts(q, n);
            lift(RDCurve::new(
                r.iter().copied().zip(q.iter().copied()).collect(),
            ))
        };
        let a = curve(anchor_rho, anchor_psnr, anchor_len)?;
        let t = curve(test_rho, test_psnr, test_len)?;
        let m = if pchip != 0 {
            BdMethod::Pchip
        } else {
            BdMethod::Cubic
        };
        *out_percent = lift(eval::bd_rate(&a, &t, m))?;
        Ok(())
    })
}

/// Channel-use index for a per-position budget `k` (piecewise quantizer).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ntscc_quantize_rate(k: f64, out: *mut u32) -> NtsccStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = lift(quantize_rate(k, QuantizerVariant::Literal))?;
        Ok(())
    })
}

/// Crate version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ntscc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
