//! C ABI over the patnet engine.
//!
//! Models are opaque `PatnetModel` handles. Every fallible call returns a
//! `PatnetStatus`; on failure a message is kept per thread and can be read
//! with `patnet_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use patnet::fusion::fuse_network;
use patnet::io::{load_weights, save_weights};
use patnet::model::{build_variant, count_flops, count_params, identify_spec, init_params, Network};
use patnet::tensor::Tensor4;
use patnet::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownVariant = 3,
    Io = 4,
    BadWeights = 5,
    Shape = 6,
    AlreadyFused = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Opaque model handle.
pub struct PatnetModel {
    net: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> PatnetStatus {
    match err {
        Error::Shape(_) | Error::Image(_) => PatnetStatus::Shape,
        Error::InvalidArgument(_) | Error::UnknownAblation { .. } => PatnetStatus::InvalidArgument,
        Error::UnknownVariant { .. } => PatnetStatus::UnknownVariant,
        Error::Io { .. } => PatnetStatus::Io,
        Error::AlreadyFused => PatnetStatus::AlreadyFused,
        Error::Store(_)
        | Error::BadMagic { .. }
        | Error::CrcMismatch { .. }
        | Error::UnsupportedVersion(_)
        | Error::Malformed(_)
        | Error::NameSetMismatch { .. } => PatnetStatus::BadWeights,
    }
}

struct Fail(PatnetStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let msg = match &e {
            Error::Io { source, .. } => format!("{e}: {source}"),
            _ => e.to_string(),
        };
        Fail(status_of(&e), msg)
    }
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PatnetStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PatnetStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PatnetStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(PatnetStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(PatnetStatus::InvalidArgument, format!("`{what}` is not valid UTF-8")))
}

unsafe fn model_ref<'a>(m: *const PatnetModel) -> Result<&'a PatnetModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

fn emit(out: *mut *mut PatnetModel, net: Network) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    unsafe { *out = Box::into_raw(Box::new(PatnetModel { net })) };
    Ok(())
}

fn usize_arg(v: u32, what: &str) -> Result<usize, Fail> {
    usize::try_from(v).map_err(|_| Fail(PatnetStatus::InvalidArgument, format!("`{what}` out of range")))
}

/// Message for the last failure on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn patnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn patnet_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Creates a model of `variant` ("T0" to "L") with seeded random weights for
/// square `input_size` inputs (a multiple of 32).
///
/// # Safety
/// `variant` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn patnet_model_init(
    variant: *const c_char,
    input_size: u32,
    seed: u64,
    out: *mut *mut PatnetModel,
) -> PatnetStatus {
    guard(|| {
        let s = usize_arg(input_size, "input_size")?;
        let spec = build_variant(str_arg(variant, "variant")?)?.with_input_size(s, s)?;
        let net = Network::from_store(&spec, init_params(&spec, seed)?)?;
        emit(out, net)
    })
}

/// Loads a weight file; the variant, input size and fused state are inferred
/// from its tensors.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn patnet_model_load(path: *const c_char, out: *mut *mut PatnetModel) -> PatnetStatus {
    guard(|| {
        let store = load_weights(PathBuf::from(str_arg(path, "path")?))?;
        let (spec, _) = identify_spec(&store)?;
        emit(out, Network::from_store(&spec, store)?)
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn patnet_model_save(model: *const PatnetModel, path: *const c_char) -> PatnetStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = PathBuf::from(str_arg(path, "path")?);
        save_weights(&m.net.clone().into_store(), path)?;
        Ok(())
    })
}

/// Writes a new fused copy of `model` to `out`; `model` is left unchanged.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn patnet_model_fuse(model: *const PatnetModel, out: *mut *mut PatnetModel) -> PatnetStatus {
    guard(|| {
        let (fused, _) = fuse_network(&model_ref(model)?.net, 0x5eed)?;
        emit(out, fused)
    })
}

/// Runs a forward pass on `batch` NCHW images of 3 x `height` x `width`
/// floats and writes `batch * num_classes` logits.
///
/// # Safety
/// `input` must hold `batch * 3 * height * width` floats and `logits` must
/// hold `logits_len` floats.
#[no_mangle]
pub unsafe extern "C" fn patnet_model_forward(
    model: *const PatnetModel,
    input: *const f32,
    batch: u32,
    height: u32,
    width: u32,
    logits: *mut f32,
    logits_len: usize,
) -> PatnetStatus {
    guard(|| {
        let m = model_ref(model)?;
        if input.is_null() {
            return Err(null("input"));
        }
        if logits.is_null() {
            return Err(null("logits"));
        }
        let (n, h, w) = (usize_arg(batch, "batch")?, usize_arg(height, "height")?, usize_arg(width, "width")?);
        let len = n
            .checked_mul(3 * h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Fail(PatnetStatus::InvalidArgument, "input extent overflows".into()))?;
        let need = n * m.net.spec().num_classes;
        if logits_len < need {
            return Err(Fail(
                PatnetStatus::BufferTooSmall,
                format!("logits buffer holds {logits_len} floats, {need} needed"),
            ));
        }
        let data = std::slice::from_raw_parts(input, len).to_vec();
        let y = m.net.forward(&Tensor4::from_vec(n, 3, h, w, data)?)?;
        std::slice::from_raw_parts_mut(logits, need).copy_from_slice(&y.data()[..need]);
        Ok(())
    })
}

/// Number of classifier outputs per image, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn patnet_model_num_classes(model: *const PatnetModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.spec().num_classes)
}

/// Input side length the model was built for, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn patnet_model_input_size(model: *const PatnetModel) -> u32 {
    model.as_ref().map_or(0, |m| m.net.spec().input_size.0 as u32)
}

/// 1 if the model has no batch-norm tensors, 0 otherwise or for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn patnet_model_is_fused(model: *const PatnetModel) -> i32 {
    model.as_ref().map_or(0, |m| i32::from(m.net.is_fused()))
}

/// Learnable parameter count of `variant`.
///
/// # Safety
/// `variant` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn patnet_count_params(variant: *const c_char, out: *mut u64) -> PatnetStatus {
    guard(|| {
        let spec = build_variant(str_arg(variant, "variant")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = count_params(&spec);
        Ok(())
    })
}

/// Multiply-accumulate count of one unfused forward pass at `input_size`.
///
/// # Safety
/// `variant` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn patnet_count_flops(variant: *const c_char, input_size: u32, out: *mut u64) -> PatnetStatus {
    guard(|| {
        let s = usize_arg(input_size, "input_size")?;
        let spec = build_variant(str_arg(variant, "variant")?)?.with_input_size(s, s)?;
        *out.as_mut().ok_or_else(|| null("out"))? = count_flops(&spec, (s, s));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn patnet_model_free(model: *mut PatnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
