//! C ABI over the core crate.
//!
//! Handles are opaque heap objects released with their `_free` function.
//! Every fallible call returns a [`DapfsrStatus`]; on failure the message is
//! available from [`dapfsr_last_error`] on the same thread. Images cross the
//! boundary as row-major `height x width x 3` arrays of doubles in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dapfsr::checkpoint::{load_decoder, load_encoder, save_decoder};
use dapfsr::config::ExperimentConfig;
use dapfsr::damma::adapt;
use dapfsr::eval;
use dapfsr::losses::FeatureExtractor;
use dapfsr::model::Model;
use dapfsr::{Error, Image};

/// Status codes; the non-zero library codes equal the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DapfsrStatus {
    Ok = 0,
    Config = 2,
    Contract = 3,
    Numeric = 4,
    Io = 5,
    Load = 6,
    Pairing = 7,
    NullArgument = 10,
    InvalidUtf8 = 11,
    Panic = 12,
}

/// Loaded encoder, decoder and latent statistics.
pub struct DapfsrModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = s);
}

fn from_error(e: Error) -> DapfsrStatus {
    let status = match e.exit_code() {
        2 => DapfsrStatus::Config,
        3 => DapfsrStatus::Contract,
        4 => DapfsrStatus::Numeric,
        5 => DapfsrStatus::Io,
        6 => DapfsrStatus::Load,
        _ => DapfsrStatus::Pairing,
    };
    set_error(e.to_string());
    status
}

fn guard(body: impl FnOnce() -> Result<(), DapfsrStatus>) -> DapfsrStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            DapfsrStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            DapfsrStatus::Panic
        }
    }
}

fn lift<T>(r: dapfsr::Result<T>) -> Result<T, DapfsrStatus> {
    r.map_err(from_error)
}

fn null(what: &str) -> DapfsrStatus {
    set_error(format!("{what} is null"));
    DapfsrStatus::NullArgument
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, DapfsrStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not UTF-8"));
        DapfsrStatus::InvalidUtf8
    })?;
    Ok(PathBuf::from(s))
}

unsafe fn image_arg(data: *const f64, len: usize, size: usize, what: &str) -> Result<Image, DapfsrStatus> {
    if data.is_null() {
        return Err(null(what));
    }
    if len != size * size * 3 {
        set_error(format!("{what} has {len} values, expected {size}x{size}x3"));
        return Err(DapfsrStatus::Contract);
    }
    let v = std::slice::from_raw_parts(data, len).to_vec();
    lift(Image::new(size, size, 3, v))
}

/// Last error message on this thread; empty after a successful call. The
/// pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn dapfsr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a decoder checkpoint and the encoder trained against it.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dapfsr_model_load(
    decoder_path: *const c_char,
    encoder_path: *const c_char,
    out: *mut *mut DapfsrModel,
) -> DapfsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let dp = path_arg(decoder_path, "decoder_path")?;
        let ep = path_arg(encoder_path, "encoder_path")?;
        let (dec, stats) = lift(load_decoder(&dp))?;
        let enc = lift(load_encoder(&ep, &dec))?;
        let model = lift(Model::new(dec, enc, stats))?;
        *out = Box::into_raw(Box::new(DapfsrModel { model }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from `dapfsr_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dapfsr_model_free(model: *mut DapfsrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// LR input side length and HR output side length.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dapfsr_model_sizes(
    model: *const DapfsrModel,
    lr_size: *mut usize,
    hr_size: *mut usize,
) -> DapfsrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if lr_size.is_null() || hr_size.is_null() {
            return Err(null("size output"));
        }
        *lr_size = m.model.encoder.config.lr_size;
        *hr_size = m.model.decoder.config.output_size();
        Ok(())
    })
}

/// Super-resolves one LR image into `hr_out`.
///
/// # Safety
/// `lr` must hold `lr_len` doubles and `hr_out` `hr_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dapfsr_super_resolve(
    model: *const DapfsrModel,
    lr: *const f64,
    lr_len: usize,
    hr_out: *mut f64,
    hr_len: usize,
) -> DapfsrStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let input = image_arg(lr, lr_len, m.encoder.config.lr_size, "lr")?;
        let size = m.decoder.config.output_size();
        if hr_out.is_null() {
            return Err(null("hr_out"));
        }
        if hr_len != size * size * 3 {
            set_error(format!("hr_out has {hr_len} slots, expected {size}x{size}x3"));
            return Err(DapfsrStatus::Contract);
        }
        let sr = lift(m.super_resolve(&input))?;
        std::slice::from_raw_parts_mut(hr_out, hr_len).copy_from_slice(sr.data());
        Ok(())
    })
}

/// One-shot adaptation of the model's decoder to the exemplar pair, in
/// place. `config_toml` may be null for defaults; otherwise it is an
/// experiment TOML whose `adapt` and `losses` sections are used.
///
/// # Safety
/// Image pointers must hold the stated number of doubles; `config_toml`
/// must be null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dapfsr_adapt(
    model: *mut DapfsrModel,
    exemplar_lr: *const f64,
    lr_len: usize,
    exemplar_hr: *const f64,
    hr_len: usize,
    config_toml: *const c_char,
) -> DapfsrStatus {
    guard(|| {
        let m = &mut model.as_mut().ok_or_else(|| null("model"))?.model;
        let lr = image_arg(exemplar_lr, lr_len, m.encoder.config.lr_size, "exemplar_lr")?;
        let hr = image_arg(exemplar_hr, hr_len, m.decoder.config.output_size(), "exemplar_hr")?;
        let cfg = if config_toml.is_null() {
            ExperimentConfig::default()
        } else {
            let text = CStr::from_ptr(config_toml).to_str().map_err(|_| {
                set_error("config_toml is not UTF-8");
                DapfsrStatus::InvalidUtf8
            })?;
            // Only the adaptation-relevant sections are read, so cross-section
            // size checks against the default datagen do not apply.
            let full: ExperimentConfig = toml::from_str(text).map_err(|e| {
                set_error(format!("config_toml: {e}"));
                DapfsrStatus::Config
            })?;
            lift(full.adapt.validate())?;
            full
        };
        let f = lift(FeatureExtractor::from_config(&cfg.losses))?;
        let (dec, _) = lift(adapt(m, &f, cfg.losses.style_statistic, &lr, &hr, &cfg.adapt))?;
        m.decoder = dec;
        Ok(())
    })
}

/// Writes the model's current decoder (adapted or not) as a checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dapfsr_model_save_decoder(model: *const DapfsrModel, path: *const c_char) -> DapfsrStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let p = path_arg(path, "path")?;
        lift(save_decoder(&p, &m.decoder, &m.stats))
    })
}

unsafe fn metric_pair(
    a: *const f64,
    b: *const f64,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<(Image, Image), DapfsrStatus> {
    if a.is_null() || b.is_null() {
        return Err(null("image"));
    }
    let n = height * width * channels;
    let mk = |p: *const f64| lift(Image::new(height, width, channels, std::slice::from_raw_parts(p, n).to_vec()));
    Ok((mk(a)?, mk(b)?))
}

/// Peak-1 PSNR in dB; identical images give positive infinity.
///
/// # Safety
/// `a` and `b` must each hold `height * width * channels` doubles.
#[no_mangle]
pub unsafe extern "C" fn dapfsr_psnr(
    a: *const f64,
    b: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    out: *mut f64,
) -> DapfsrStatus {
    guard(|| {
        let (x, y) = metric_pair(a, b, height, width, channels)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = lift(eval::psnr(&x, &y))?;
        Ok(())
    })
}

/// Mean windowed SSIM on channel-mean grayscale.
///
/// # Safety
/// `a` and `b` must each hold `height * width * channels` doubles.
#[no_mangle]
pub unsafe extern "C" fn dapfsr_ssim(
    a: *const f64,
    b: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    out: *mut f64,
) -> DapfsrStatus {
    guard(|| {
        let (x, y) = metric_pair(a, b, height, width, channels)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = lift(eval::ssim(&x, &y))?;
        Ok(())
    })
}
