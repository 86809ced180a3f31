//! C ABI over the attack/defense toolkit.
//!
//! All handles are opaque; every constructor has a matching `_free`.
//! Fallible calls either return a status code or a null pointer; in both
//! cases `segadv_last_error` describes the most recent failure on the
//! calling thread. Returned pointers are owned by the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use segadv::attacks::{dnnm_attack, fgsm, iterative_attack, AttackConfig, IterTarget};
use segadv::defenses::{nlm_denoise, quilt, FilteringH, NlmConfig, PatchDatabase};
use segadv::metrics::ConfusionMatrix;
use segadv::segnet::{predict_mask, SegModel};
use segadv::types::{Image, LabelMask};

/// Status of a fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SegadvStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument value was rejected (bad size, bad range, bad config).
    InvalidArgument = 2,
    /// The underlying file could not be read or written.
    IoError = 3,
    /// A file was readable but not in the expected format.
    FormatError = 4,
    /// The computation hit a numerical failure (non-finite loss, degenerate
    /// gradient, budget violation).
    NumericalError = 5,
    /// A panic was caught at the boundary; the handle state is unspecified.
    InternalError = 6,
}

pub struct SegadvModel(SegModel);
pub struct SegadvImage(Image);
pub struct SegadvPatchDb(PatchDatabase);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized: String = message.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn fail(status: SegadvStatus, message: &str) -> SegadvStatus {
    set_error(message);
    status
}

/// Run `f`, converting panics into a null result with `InternalError` set.
fn guarded<T>(f: impl FnOnce() -> *mut T) -> *mut T {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(p) => p,
        Err(_) => {
            set_error("internal panic");
            ptr::null_mut()
        }
    }
}

fn guarded_status(f: impl FnOnce() -> SegadvStatus) -> SegadvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(SegadvStatus::InternalError, "internal panic"),
    }
}

/// # Safety
/// `path` must be a valid NUL-terminated string.
unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, SegadvStatus> {
    if path.is_null() {
        return Err(fail(SegadvStatus::NullArgument, "path is null"));
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(fail(SegadvStatus::InvalidArgument, "path is not valid UTF-8")),
    }
}

/// Message of the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn segadv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

// ---- model ----------------------------------------------------------------

/// Load a model checkpoint. Returns null on failure.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn segadv_model_load(path: *const c_char) -> *mut SegadvModel {
    guarded(|| {
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(_) => return ptr::null_mut(),
        };
        match SegModel::load(path) {
            Ok(m) => Box::into_raw(Box::new(SegadvModel(m))),
            Err(e) => {
                set_error(&e.to_string());
                ptr::null_mut()
            }
        }
    })
}

/// # Safety
/// `model` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn segadv_model_free(model: *mut SegadvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes, or 0 when `model` is null.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn segadv_model_num_classes(model: *const SegadvModel) -> u32 {
    match model.as_ref() {
        Some(m) => m.0.n_classes as u32,
        None => 0,
    }
}

// ---- images ----------------------------------------------------------------

/// Wrap a row-major H x W x C 8-bit buffer (copied). Returns null on failure.
///
/// # Safety
/// `data` must point to `height * width * channels` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn segadv_image_create(
    height: usize,
    width: usize,
    channels: usize,
    data: *const u8,
) -> *mut SegadvImage {
    guarded(|| {
        if data.is_null() {
            set_error("data is null");
            return ptr::null_mut();
        }
        let len = height * width * channels;
        if len == 0 {
            set_error("image dimensions must be positive");
            return ptr::null_mut();
        }
        let buf = std::slice::from_raw_parts(data, len).to_vec();
        Box::into_raw(Box::new(SegadvImage(Image::new(height, width, channels, buf))))
    })
}

/// # Safety
/// `image` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn segadv_image_free(image: *mut SegadvImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// # Safety
/// `image` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn segadv_image_height(image: *const SegadvImage) -> usize {
    image.as_ref().map_or(0, |i| i.0.height)
}

/// # Safety
/// `image` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn segadv_image_width(image: *const SegadvImage) -> usize {
    image.as_ref().map_or(0, |i| i.0.width)
}

/// # Safety
/// `image` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn segadv_image_channels(image: *const SegadvImage) -> usize {
    image.as_ref().map_or(0, |i| i.0.channels)
}

/// Copy the pixel buffer into `out` (`out_len` must be at least H*W*C).
///
/// # Safety
/// `image` must be a live handle; `out` must point to `out_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn segadv_image_copy_data(
    image: *const SegadvImage,
    out: *mut u8,
    out_len: usize,
) -> SegadvStatus {
    guarded_status(|| {
        let Some(img) = image.as_ref() else {
            return fail(SegadvStatus::NullArgument, "image is null");
        };
        if out.is_null() {
            return fail(SegadvStatus::NullArgument, "out is null");
        }
        let data = img.0.data();
        if out_len < data.len() {
            return fail(SegadvStatus::InvalidArgument, "out buffer too small");
        }
        std::slice::from_raw_parts_mut(out, data.len()).copy_from_slice(data);
        SegadvStatus::Ok
    })
}

// ---- inference --------------------------------------------------------------

/// Per-pixel class prediction; writes H*W class ids into `out`.
///
/// # Safety
/// `model` and `image` must be live handles; `out` must point to `out_len`
/// writable bytes.
#[no_mangle]
pub unsafe extern "C" fn segadv_predict(
    model: *const SegadvModel,
    image: *const SegadvImage,
    out: *mut u8,
    out_len: usize,
) -> SegadvStatus {
    guarded_status(|| {
        let (Some(m), Some(img)) = (model.as_ref(), image.as_ref()) else {
            return fail(SegadvStatus::NullArgument, "model or image is null");
        };
        if out.is_null() {
            return fail(SegadvStatus::NullArgument, "out is null");
        }
        let need = img.0.height * img.0.width;
        if out_len < need {
            return fail(SegadvStatus::InvalidArgument, "out buffer too small");
        }
        match m.0.forward_scores(&img.0) {
            Ok((scores, _)) => {
                let mask = predict_mask(&scores);
                std::slice::from_raw_parts_mut(out, need).copy_from_slice(mask.classes());
                SegadvStatus::Ok
            }
            Err(e) => fail(SegadvStatus::NumericalError, &e.to_string()),
        }
    })
}

// ---- attacks ----------------------------------------------------------------

/// Single signed-gradient step against the model's own prediction.
/// Returns the adversarial image, or null on failure.
///
/// # Safety
/// `model` and `image` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn segadv_attack_fgsm(
    model: *const SegadvModel,
    image: *const SegadvImage,
    lambda: f64,
    epsilon: f64,
) -> *mut SegadvImage {
    guarded(|| {
        let (Some(m), Some(img)) = (model.as_ref(), image.as_ref()) else {
            set_error("model or image is null");
            return ptr::null_mut();
        };
        match fgsm(&m.0, &img.0, &AttackConfig::ascend(lambda, epsilon)) {
            Ok((adv, _)) => Box::into_raw(Box::new(SegadvImage(adv))),
            Err(e) => {
                set_error(&e.to_string());
                ptr::null_mut()
            }
        }
    })
}

/// Iterated descent toward the least-likely class of the clean prediction.
/// `iterations == 0` selects the default budget floor(min(eps+4, 1.25*eps)).
///
/// # Safety
/// `model` and `image` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn segadv_attack_least_likely(
    model: *const SegadvModel,
    image: *const SegadvImage,
    lambda: f64,
    epsilon: f64,
    iterations: usize,
) -> *mut SegadvImage {
    guarded(|| {
        let (Some(m), Some(img)) = (model.as_ref(), image.as_ref()) else {
            set_error("model or image is null");
            return ptr::null_mut();
        };
        let mut cfg = AttackConfig::descend(lambda, epsilon);
        cfg.iterations = (iterations > 0).then_some(iterations);
        match iterative_attack(&m.0, &img.0, &cfg, IterTarget::LeastLikely) {
            Ok((adv, _)) => Box::into_raw(Box::new(SegadvImage(adv))),
            Err(e) => {
                set_error(&e.to_string());
                ptr::null_mut()
            }
        }
    })
}

/// Targeted removal of one class: every pixel the model predicts as
/// `objective` is pushed toward its spatially nearest other class.
///
/// # Safety
/// `model` and `image` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn segadv_attack_remove_class(
    model: *const SegadvModel,
    image: *const SegadvImage,
    objective: u8,
    lambda: f64,
    epsilon: f64,
    iterations: usize,
) -> *mut SegadvImage {
    guarded(|| {
        let (Some(m), Some(img)) = (model.as_ref(), image.as_ref()) else {
            set_error("model or image is null");
            return ptr::null_mut();
        };
        let mut cfg = AttackConfig::descend(lambda, epsilon);
        cfg.iterations = (iterations > 0).then_some(iterations);
        match dnnm_attack(&m.0, &img.0, objective, &cfg) {
            Ok((adv, _)) => Box::into_raw(Box::new(SegadvImage(adv))),
            Err(e) => {
                set_error(&e.to_string());
                ptr::null_mut()
            }
        }
    })
}

// ---- defenses ---------------------------------------------------------------

/// Non-local means denoising. `h <= 0` selects the noise-adaptive filtering
/// strength; `h > 0` fixes it. Returns null on failure.
///
/// # Safety
/// `image` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn segadv_nlm_denoise(image: *const SegadvImage, h: f64) -> *mut SegadvImage {
    guarded(|| {
        let Some(img) = image.as_ref() else {
            set_error("image is null");
            return ptr::null_mut();
        };
        let cfg = NlmConfig {
            filtering_h: if h > 0.0 { FilteringH::Fixed(h) } else { FilteringH::Auto },
            ..NlmConfig::default()
        };
        match nlm_denoise(&img.0, &cfg) {
            Ok(out) => Box::into_raw(Box::new(SegadvImage(out))),
            Err(e) => {
                set_error(&e.to_string());
                ptr::null_mut()
            }
        }
    })
}

/// Load a quilting patch database. Returns null on failure.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn segadv_patch_db_load(path: *const c_char) -> *mut SegadvPatchDb {
    guarded(|| {
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(_) => return ptr::null_mut(),
        };
        match PatchDatabase::load(path) {
            Ok(db) => Box::into_raw(Box::new(SegadvPatchDb(db))),
            Err(e) => {
                set_error(&e.to_string());
                ptr::null_mut()
            }
        }
    })
}

/// # Safety
/// `db` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn segadv_patch_db_free(db: *mut SegadvPatchDb) {
    if !db.is_null() {
        drop(Box::from_raw(db));
    }
}

/// Replace every tile of the image by its nearest database patch.
/// Returns null on failure.
///
/// # Safety
/// `image` and `db` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn segadv_quilt(
    image: *const SegadvImage,
    db: *const SegadvPatchDb,
) -> *mut SegadvImage {
    guarded(|| {
        let (Some(img), Some(db)) = (image.as_ref(), db.as_ref()) else {
            set_error("image or db is null");
            return ptr::null_mut();
        };
        match quilt(&img.0, &db.0) {
            Ok(out) => Box::into_raw(Box::new(SegadvImage(out))),
            Err(e) => {
                set_error(&e.to_string());
                ptr::null_mut()
            }
        }
    })
}

// ---- metrics ----------------------------------------------------------------

/// Mean intersection-over-union between two flat H*W class-id buffers.
/// Classes absent from both are excluded from the mean.
///
/// # Safety
/// `pred` and `truth` must point to `len` readable bytes; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn segadv_miou(
    pred: *const u8,
    truth: *const u8,
    len: usize,
    n_classes: u32,
    out: *mut f64,
) -> SegadvStatus {
    guarded_status(|| {
        if pred.is_null() || truth.is_null() || out.is_null() {
            return fail(SegadvStatus::NullArgument, "pred, truth and out must be non-null");
        }
        if len == 0 || n_classes == 0 {
            return fail(SegadvStatus::InvalidArgument, "len and n_classes must be positive");
        }
        let p = std::slice::from_raw_parts(pred, len);
        let t = std::slice::from_raw_parts(truth, len);
        let pm = LabelMask::new(1, len, p.to_vec());
        let tm = LabelMask::new(1, len, t.to_vec());
        let mut cm = ConfusionMatrix::new(n_classes as usize);
        if let Err(e) = cm.accumulate(&pm, &tm, None) {
            return fail(SegadvStatus::InvalidArgument, &e.to_string());
        }
        match cm.miou() {
            Ok(v) => {
                *out = v;
                SegadvStatus::Ok
            }
            Err(e) => fail(SegadvStatus::NumericalError, &e.to_string()),
        }
    })
}
