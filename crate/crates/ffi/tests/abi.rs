use std::ffi::{CStr, CString};
use std::ptr;

use dapfsr::checkpoint::{save_decoder, save_encoder};
use dapfsr::decoder::{Decoder, DecoderConfig};
use dapfsr::encoder::{Encoder, EncoderConfig};
use dapfsr_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    dec: CString,
    enc: CString,
    out: CString,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let dec = Decoder::new(
        DecoderConfig {
            resolutions: vec![4, 8, 16, 32],
            channels: vec![4, 4, 3, 3],
            d_w: 3,
            styles_per_level: 1,
            mapping_depth: 1,
        },
        1,
    )
    .unwrap();
    let stats = dec.latent_statistics(64, 2).unwrap();
    let enc = Encoder::new(
        EncoderConfig {
            lr_size: 4,
            upsample: 4,
            stage_channels: [3, 4, 4, 3],
            istn_sites: vec![0, 2],
            istn_hidden: 3,
            context_channels: 4,
            ale_reduction: 2,
        },
        dec.l(),
        dec.d_w(),
        3,
    )
    .unwrap();
    let dp = dir.path().join("decoder.ckpt");
    let ep = dir.path().join("encoder.ckpt");
    save_decoder(&dp, &dec, &stats).unwrap();
    save_encoder(&ep, &enc, &dec.checksum()).unwrap();
    let c = |p: std::path::PathBuf| CString::new(p.to_str().unwrap()).unwrap();
    Fixture {
        out: c(dir.path().join("adapted.ckpt")),
        dec: c(dp),
        enc: c(ep),
        _dir: dir,
    }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(dapfsr_last_error()) }.to_str().unwrap().to_string()
}

fn ramp(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| 0.5 + 0.4 * ((i as f64) * 0.37 + phase).sin()).collect()
}

#[test]
fn load_super_resolve_adapt_and_save() {
    let fx = fixture();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(dapfsr_model_load(fx.dec.as_ptr(), fx.enc.as_ptr(), &mut model), DapfsrStatus::Ok);
        let (mut lr, mut hr) = (0usize, 0usize);
        assert_eq!(dapfsr_model_sizes(model, &mut lr, &mut hr), DapfsrStatus::Ok);
        assert_eq!((lr, hr), (4, 32));
        let input = ramp(lr * lr * 3, 0.0);
        let mut before = vec![0.0; hr * hr * 3];
        assert_eq!(
            dapfsr_super_resolve(model, input.as_ptr(), input.len(), before.as_mut_ptr(), before.len()),
            DapfsrStatus::Ok
        );
        assert!(before.iter().all(|v| (0.0..=1.0).contains(v)));

        let ex_hr = ramp(hr * hr * 3, 1.0);
        let cfg = CString::new("[adapt]\nouter_budget = 1\ninner_steps = 1\nbatch_size = 2\neta = 0.1\n[losses]\nextractor_channels = [4, 4, 4, 4]\n").unwrap();
        assert_eq!(
            dapfsr_adapt(model, input.as_ptr(), input.len(), ex_hr.as_ptr(), ex_hr.len(), cfg.as_ptr()),
            DapfsrStatus::Ok,
            "{}",
            last_error()
        );
        let mut after = vec![0.0; hr * hr * 3];
        dapfsr_super_resolve(model, input.as_ptr(), input.len(), after.as_mut_ptr(), after.len());
        assert_ne!(before, after);
        assert_eq!(dapfsr_model_save_decoder(model, fx.out.as_ptr()), DapfsrStatus::Ok);
        dapfsr_model_free(model);
    }
}

#[test]
fn errors_are_reported_with_codes() {
    let fx = fixture();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(dapfsr_model_load(ptr::null(), fx.enc.as_ptr(), &mut model), DapfsrStatus::NullArgument);
        assert!(model.is_null());
        let missing = CString::new("/nonexistent/decoder.ckpt").unwrap();
        assert_eq!(dapfsr_model_load(missing.as_ptr(), fx.enc.as_ptr(), &mut model), DapfsrStatus::Io);
        assert!(last_error().contains("nonexistent"));
        // encoder file is not a decoder checkpoint
        assert_eq!(dapfsr_model_load(fx.enc.as_ptr(), fx.enc.as_ptr(), &mut model), DapfsrStatus::Load);

        assert_eq!(dapfsr_model_load(fx.dec.as_ptr(), fx.enc.as_ptr(), &mut model), DapfsrStatus::Ok);
        assert!(last_error().is_empty());
        let short = vec![0.5; 10];
        let mut out = vec![0.0; 32 * 32 * 3];
        assert_eq!(
            dapfsr_super_resolve(model, short.as_ptr(), short.len(), out.as_mut_ptr(), out.len()),
            DapfsrStatus::Contract
        );
        let bad = CString::new("[adapt]\nxi = -1.0\n").unwrap();
        let lr = vec![0.5; 48];
        let hr = vec![0.5; 32 * 32 * 3];
        assert_eq!(
            dapfsr_adapt(model, lr.as_ptr(), lr.len(), hr.as_ptr(), hr.len(), bad.as_ptr()),
            DapfsrStatus::Config
        );
        dapfsr_model_free(model);
        dapfsr_model_free(ptr::null_mut());
    }
}

#[test]
fn metrics_through_the_abi() {
    let a = vec![0.3; 16 * 16 * 3];
    let b = vec![0.4; 16 * 16 * 3];
    let mut v = 0.0;
    unsafe {
        assert_eq!(dapfsr_psnr(a.as_ptr(), b.as_ptr(), 16, 16, 3, &mut v), DapfsrStatus::Ok);
        assert!((v - 20.0).abs() < 1e-9);
        assert_eq!(dapfsr_psnr(a.as_ptr(), a.as_ptr(), 16, 16, 3, &mut v), DapfsrStatus::Ok);
        assert!(v.is_infinite());
        assert_eq!(dapfsr_ssim(a.as_ptr(), a.as_ptr(), 16, 16, 3, &mut v), DapfsrStatus::Ok);
        assert_eq!(v, 1.0);
        assert_eq!(dapfsr_ssim(a.as_ptr(), b.as_ptr(), 8, 8, 3, &mut v), DapfsrStatus::Config);
    }
}

#[test]
fn header_declares_the_abi() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dapfsr.h")).unwrap();
    for sym in [
        "dapfsr_model_load",
        "dapfsr_model_free",
        "dapfsr_model_sizes",
        "dapfsr_super_resolve",
        "dapfsr_adapt",
        "dapfsr_model_save_decoder",
        "dapfsr_psnr",
        "dapfsr_ssim",
        "dapfsr_last_error",
        "DAPFSR_STATUS_PAIRING",
        "typedef struct DapfsrModel DapfsrModel",
    ] {
        assert!(header.contains(sym), "{sym} missing from header");
    }
}
