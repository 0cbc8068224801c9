use std::ffi::{CStr, CString};
use std::ptr;

use candle_core::DType;
use ntscc::checkpoint::{self, TrainState};
use ntscc::dataset::synthetic_image;
use ntscc::model::NtsccModel;
use ntscc::params::ParamStore;
use ntscc::transform::ArchConfig;
use ntscc_ffi::*;

fn micro_checkpoint(dir: &std::path::Path) -> CString {
    let cfg = ArchConfig::micro();
    let store = ParamStore::new(3, DType::F32);
    NtsccModel::new(&store, &cfg).unwrap();
    let p = dir.join("micro.safetensors");
    checkpoint::save(&p, &store, &cfg, &TrainState::default()).unwrap();
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = ntscc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn load_transmit_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = micro_checkpoint(dir.path());
    let mut h = ptr::null_mut();
    assert_eq!(
        unsafe { ntscc_model_load(path.as_ptr(), &mut h) },
        NtsccStatus::Ok
    );
    assert!(!h.is_null());
    let img = synthetic_image(32, 48, 1);
    let mut out = vec![0.0f32; 32 * 48 * 3];
    let (mut rho, mut psnr) = (0.0, 0.0);
    let lambda = ArchConfig::micro().lambda_grid[2];
    let run = |out: &mut Vec<f32>, rho: &mut f64, psnr: &mut f64| unsafe {
        ntscc_transmit(
            h,
            img.pixels().as_ptr(),
            32,
            48,
            lambda,
            0.2,
            10.0,
            7,
            out.as_mut_ptr(),
            rho,
            psnr,
        )
    };
    assert_eq!(run(&mut out, &mut rho, &mut psnr), NtsccStatus::Ok);
    assert!(rho > 0.0 && psnr.is_finite());
    assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    // same seed, same reconstruction
    let mut again = vec![0.0f32; out.len()];
    assert_eq!(run(&mut again, &mut rho, &mut psnr), NtsccStatus::Ok);
    assert_eq!(out, again);
    let mut p2 = 0.0;
    assert_eq!(
        unsafe { ntscc_psnr(img.pixels().as_ptr(), out.as_ptr(), 32, 48, &mut p2) },
        NtsccStatus::Ok
    );
    assert!((p2 - psnr).abs() < 1e-9);

    assert_eq!(
        unsafe { ntscc_model_set_channel(h, 1, 16) },
        NtsccStatus::Ok
    );
    assert_eq!(run(&mut out, &mut rho, &mut psnr), NtsccStatus::Ok);
    assert_eq!(
        unsafe { ntscc_model_set_channel(h, 1, 0) },
        NtsccStatus::InvalidArgument
    );

    // 30 rows is not a multiple of 16
    let st = unsafe {
        ntscc_transmit(
            h,
            img.pixels().as_ptr(),
            30,
            48,
            lambda,
            0.2,
            10.0,
            7,
            out.as_mut_ptr(),
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, NtsccStatus::DimensionMismatch);
    assert!(!last_error().is_empty());
    // λ outside the table
    let st = unsafe {
        ntscc_transmit(
            h,
            img.pixels().as_ptr(),
            32,
            48,
            1e6,
            0.2,
            10.0,
            7,
            out.as_mut_ptr(),
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, NtsccStatus::OutOfRange);
    unsafe { ntscc_model_free(h) };
    unsafe { ntscc_model_free(ptr::null_mut()) };
}

#[test]
fn error_paths() {
    let mut h = ptr::null_mut();
    assert_eq!(
        unsafe { ntscc_model_load(ptr::null(), &mut h) },
        NtsccStatus::NullPointer
    );
    let missing = CString::new("/nonexistent/ntscc.safetensors").unwrap();
    assert_eq!(
        unsafe { ntscc_model_load(missing.as_ptr(), &mut h) },
        NtsccStatus::Io
    );
    assert!(last_error().contains("nonexistent"));
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.safetensors");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { ntscc_model_load(junk.as_ptr(), &mut h) },
        NtsccStatus::Format
    );
    assert!(h.is_null());
    let s = unsafe { CStr::from_ptr(ntscc_status_string(NtsccStatus::Format)) };
    assert_eq!(s.to_str().unwrap(), "format error");
    assert!(!unsafe { CStr::from_ptr(ntscc_version()) }
        .to_bytes()
        .is_empty());
}

#[test]
fn quantizer_and_bd_rate() {
    let mut q = 0u32;
    for (k, want) in [
        (3.0, 0),
        (4.0, 1),
        (20.0, 1),
        (32.0, 1),
        (33.0, 2),
        (48.0, 3),
    ] {
        assert_eq!(unsafe { ntscc_quantize_rate(k, &mut q) }, NtsccStatus::Ok);
        assert_eq!(q, want, "k = {k}");
    }
    assert_eq!(
        unsafe { ntscc_quantize_rate(-1.0, &mut q) },
        NtsccStatus::InvalidArgument
    );
    let r = [0.01, 0.02, 0.04, 0.08];
    let p = [25.0, 28.0, 31.0, 33.0];
    let r2 = r.map(|v| v * 2.0);
    let mut bd = 0.0;
    let st = unsafe {
        ntscc_bd_rate(
            r.as_ptr(),
            p.as_ptr(),
            4,
            r2.as_ptr(),
            p.as_ptr(),
            4,
            0,
            &mut bd,
        )
    };
    assert_eq!(st, NtsccStatus::Ok);
    assert!((bd - 100.0).abs() < 0.1);
    let st = unsafe {
        ntscc_bd_rate(
            r.as_ptr(),
            p.as_ptr(),
            3,
            r.as_ptr(),
            p.as_ptr(),
            3,
            0,
            &mut bd,
        )
    };
    assert_eq!(st, NtsccStatus::InvalidArgument);
}

#[test]
fn header_is_generated_and_compiles() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/ntscc.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in [
        "ntscc_model_load",
        "ntscc_model_free",
        "ntscc_transmit",
        "ntscc_bd_rate",
        "ntscc_last_error",
        "NTSCC_STATUS_OK",
        "typedef struct NtsccModelHandle NtsccModelHandle",
    ] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    // syntax-check with the system C compiler when one is installed
    if let Ok(st) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .status()
    {
        assert!(st.success(), "header does not compile");
    }
}
