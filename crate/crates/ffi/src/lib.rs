//! C ABI for deployed checkpoints.
//!
//! Every fallible function returns an [`XmStatus`]; on failure the message
//! is available from [`xm_last_error`] on the same thread. Images are
//! passed as `height * width * 3` doubles in `[0, 1]`, row-major with
//! channels innermost, at the model's input size.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use xmodal_core::checkpoint::load_checkpoint;
use xmodal_core::image::ImageTensor;
use xmodal_core::model::CrossModalModel;
use xmodal_core::vit::{Modality, Vit};
use xmodal_core::Error;

/// Status codes; the non-zero values match the `xmodal` exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XmStatus {
    Ok = 0,
    /// Bad argument: null pointer, wrong buffer length, pruned model asked
    /// for alignment outputs.
    Usage = 1,
    /// Unreadable or malformed checkpoint.
    Data = 2,
    /// Shape or numerical failure inside the model, or a caught panic.
    Numerical = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XmModality {
    Wl = 0,
    Nbi = 1,
}

/// Geometry of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct XmModelInfo {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub num_patches: usize,
    /// 1 when the alignment parameters were stripped.
    pub pruned: u8,
}

/// Opaque handle to a loaded model.
pub struct XmModel {
    model: CrossModalModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> XmStatus {
    match e.exit_code() {
        1 => XmStatus::Usage,
        2 => XmStatus::Data,
        _ => XmStatus::Numerical,
    }
}

fn usage(msg: &str) -> XmStatus {
    set_error(msg.to_string());
    XmStatus::Usage
}

/// Runs `f`, records any error or panic, and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), XmStatus>) -> XmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => XmStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            XmStatus::Numerical
        }
    }
}

fn fail(e: Error) -> XmStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

/// # Safety
/// `model` must be null or a live handle from [`xm_model_load`].
unsafe fn model_ref<'a>(model: *const XmModel) -> Result<&'a XmModel, XmStatus> {
    model.as_ref().ok_or_else(|| usage("null model handle"))
}

/// # Safety
/// `pixels` must point at `len` readable doubles.
unsafe fn read_image(model: &XmModel, pixels: *const f64, len: usize) -> Result<ImageTensor, XmStatus> {
    let size = model.model.config().image_size;
    let expected = size * size * 3;
    if pixels.is_null() {
        return Err(usage("null image buffer"));
    }
    if len != expected {
        return Err(usage(&format!(
            "image buffer has {len} values, expected {expected} ({size}x{size}x3)"
        )));
    }
    let data = std::slice::from_raw_parts(pixels, len).to_vec();
    ImageTensor::new(size, size, data).map_err(fail)
}

/// # Safety
/// `out` must point at `out_len` writable doubles.
unsafe fn write_out(values: &[f64], out: *mut f64, out_len: usize) -> Result<(), XmStatus> {
    if out.is_null() {
        return Err(usage("null output buffer"));
    }
    if out_len != values.len() {
        return Err(usage(&format!(
            "output buffer has {out_len} slots, need {}",
            values.len()
        )));
    }
    std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(values);
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn xm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn xm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a full or pruned checkpoint. On success `*out` owns a handle to
/// release with [`xm_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn xm_model_load(path: *const c_char, out: *mut *mut XmModel) -> XmStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(usage("null argument"));
        }
        *out = ptr::null_mut();
        let p = CStr::from_ptr(path).to_str().map_err(|_| usage("path is not UTF-8"))?;
        let model = load_checkpoint(Path::new(p)).map_err(fail)?;
        *out = Box::into_raw(Box::new(XmModel { model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`xm_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn xm_model_free(model: *mut XmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xm_model_info(model: *const XmModel, out: *mut XmModelInfo) -> XmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| usage("null output"))?;
        let c = m.model.config();
        *out = XmModelInfo {
            image_size: c.image_size,
            patch_size: c.patch_size,
            embed_dim: c.embed_dim,
            heads: c.heads,
            layers: c.layers,
            num_classes: c.num_classes,
            num_patches: c.num_patches(),
            pruned: m.model.is_pruned() as u8,
        };
        Ok(())
    })
}

/// Class logits of one WL image; `logits_len` must equal `num_classes`.
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn xm_model_predict(
    model: *const XmModel,
    pixels: *const f64,
    len: usize,
    logits: *mut f64,
    logits_len: usize,
) -> XmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let img = read_image(m, pixels, len)?;
        let inf = m.model.infer(&img).map_err(fail)?;
        write_out(&inf.logits, logits, logits_len)
    })
}

/// Normed class token of one WL image; `out_len` must equal `embed_dim`.
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn xm_model_class_token(
    model: *const XmModel,
    pixels: *const f64,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> XmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let img = read_image(m, pixels, len)?;
        let inf = m.model.infer(&img).map_err(fail)?;
        write_out(&inf.class_feature, out, out_len)
    })
}

/// Last-layer class-to-patch attention averaged over heads, raster patch
/// order; `out_len` must equal `num_patches`.
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn xm_model_attention(
    model: *const XmModel,
    pixels: *const f64,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> XmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let img = read_image(m, pixels, len)?;
        let inf = m.model.infer(&img).map_err(fail)?;
        write_out(&Vit::last_layer_cls_attention(&inf), out, out_len)
    })
}

/// Alignment response map of one image; fails with `Usage` on a pruned
/// model. `out_len` must equal `num_patches`.
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn xm_model_response_map(
    model: *const XmModel,
    pixels: *const f64,
    len: usize,
    modality: XmModality,
    out: *mut f64,
    out_len: usize,
) -> XmStatus {
    guard(|| {
        let m = model_ref(model)?;
        if m.model.is_pruned() {
            return Err(usage("model is pruned: no alignment parameters"));
        }
        let img = read_image(m, pixels, len)?;
        let modality = match modality {
            XmModality::Wl => Modality::Wl,
            XmModality::Nbi => Modality::Nbi,
        };
        let map = m.model.response_map(&img, modality).map_err(fail)?;
        write_out(&map.values, out, out_len)
    })
}
