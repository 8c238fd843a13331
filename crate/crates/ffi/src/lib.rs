//! C ABI over the `mmsfe` detector.
//!
//! Every function returns an [`MmsfeStatus`]. On failure a message is kept
//! per thread and can be read with [`mmsfe_last_error`]. Models are opaque
//! handles created by [`mmsfe_model_load`] and released with
//! [`mmsfe_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mmsfe::geometry::{iou, nms_indices, BBox, Detection};
use mmsfe::network::Model;
use mmsfe::phantom::{generate_scene, PhantomParams};
use mmsfe::train::load_model;
use mmsfe::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmsfeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Internal = 5,
}

/// Corner-form box in pixel coordinates.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmsfeBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmsfeDetection {
    pub bbox: MmsfeBox,
    pub score: f64,
    /// 0 = NMIBC, 1 = MIBC.
    pub class_id: u32,
}

/// Opaque trained model.
pub struct MmsfeModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(s).expect("nul removed")));
}

fn fail(status: MmsfeStatus, msg: impl Into<String>) -> MmsfeStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> MmsfeStatus {
    let status = match &e {
        Error::Io { .. } => MmsfeStatus::Io,
        Error::Format { .. } | Error::Config(_) => MmsfeStatus::Format,
        Error::InvalidArgument(_) | Error::Shape(_) => MmsfeStatus::InvalidArgument,
        _ => MmsfeStatus::Internal,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> MmsfeStatus) -> MmsfeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(MmsfeStatus::Internal, format!("internal error: {msg}"))
        }
    }
}

impl From<BBox> for MmsfeBox {
    fn from(b: BBox) -> Self {
        MmsfeBox {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
        }
    }
}

impl From<MmsfeBox> for BBox {
    fn from(b: MmsfeBox) -> Self {
        BBox::new(b.x1, b.y1, b.x2, b.y2)
    }
}

impl From<Detection> for MmsfeDetection {
    fn from(d: Detection) -> Self {
        MmsfeDetection {
            bbox: d.bbox.into(),
            score: d.score,
            class_id: d.class_id as u32,
        }
    }
}

/// Message for the most recent failure on this thread, or NULL. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn mmsfe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint written by `mmsfe train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mmsfe_model_load(path: *const c_char, out: *mut *mut MmsfeModel) -> MmsfeStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(MmsfeStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let Ok(p) = CStr::from_ptr(path).to_str() else {
            return fail(MmsfeStatus::InvalidArgument, "path is not UTF-8");
        };
        match load_model(Path::new(p)) {
            Ok((_, model)) => {
                *out = Box::into_raw(Box::new(MmsfeModel { model }));
                MmsfeStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`mmsfe_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mmsfe_model_free(model: *mut MmsfeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Square input side the model was trained on.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mmsfe_model_image_size(model: *const MmsfeModel, out: *mut usize) -> MmsfeStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(MmsfeStatus::NullPointer, "null argument");
        }
        *out = (*model).model.config.image_size;
        MmsfeStatus::Ok
    })
}

/// Detects tumours in a row-major `height x width` image with values in
/// `[0, 1]`. At most `capacity` detections are written to `out` in
/// descending score order; `out_count` receives the total number found.
///
/// # Safety
/// `pixels` must hold `height * width` values and `out` room for `capacity`
/// entries (`out` may be NULL when `capacity` is 0).
#[no_mangle]
pub unsafe extern "C" fn mmsfe_model_detect(
    model: *const MmsfeModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    out: *mut MmsfeDetection,
    capacity: usize,
    out_count: *mut usize,
) -> MmsfeStatus {
    guard(|| {
        if model.is_null() || pixels.is_null() || out_count.is_null() || (out.is_null() && capacity > 0) {
            return fail(MmsfeStatus::NullPointer, "null argument");
        }
        let Some(n) = height.checked_mul(width).filter(|&n| n > 0) else {
            return fail(MmsfeStatus::InvalidArgument, "image must be non-empty");
        };
        let img = std::slice::from_raw_parts(pixels, n);
        match (*model).model.detect_image(img, height, width) {
            Ok(dets) => {
                *out_count = dets.len();
                for (i, d) in dets.into_iter().take(capacity).enumerate() {
                    *out.add(i) = d.into();
                }
                MmsfeStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Intersection over union of two boxes.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mmsfe_iou(a: MmsfeBox, b: MmsfeBox, out: *mut f64) -> MmsfeStatus {
    guard(|| {
        if out.is_null() {
            return fail(MmsfeStatus::NullPointer, "null argument");
        }
        *out = iou(&a.into(), &b.into());
        MmsfeStatus::Ok
    })
}

/// Class-wise greedy NMS. Writes kept indices (into `dets`) to `keep` in
/// keep order and their number to `kept`. `keep` must hold `n` entries.
///
/// # Safety
/// `dets` must hold `n` entries and `keep` room for `n` indices.
#[no_mangle]
pub unsafe extern "C" fn mmsfe_nms(
    dets: *const MmsfeDetection,
    n: usize,
    iou_threshold: f64,
    keep: *mut usize,
    kept: *mut usize,
) -> MmsfeStatus {
    guard(|| {
        if kept.is_null() || (n > 0 && (dets.is_null() || keep.is_null())) {
            return fail(MmsfeStatus::NullPointer, "null argument");
        }
        if !(0.0..=1.0).contains(&iou_threshold) {
            return fail(MmsfeStatus::InvalidArgument, "iou_threshold must be in [0, 1]");
        }
        let src = if n == 0 { &[][..] } else { std::slice::from_raw_parts(dets, n) };
        let v: Vec<Detection> = src
            .iter()
            .map(|d| Detection {
                bbox: d.bbox.into(),
                score: d.score,
                class_id: d.class_id as usize,
            })
            .collect();
        let idx = nms_indices(&v, iou_threshold);
        for (i, &k) in idx.iter().enumerate() {
            *keep.add(i) = k;
        }
        *kept = idx.len();
        MmsfeStatus::Ok
    })
}

/// Renders the deterministic phantom scene for `seed` at `size x size`
/// with geometry scaled to the image size. `pixels` receives `size * size` values,
/// `gt` the tumour box and `class_id` its label.
///
/// # Safety
/// `pixels` must have room for `capacity` values; `gt` and `class_id` must
/// be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mmsfe_phantom_scene(
    seed: u64,
    size: usize,
    pixels: *mut f64,
    capacity: usize,
    gt: *mut MmsfeBox,
    class_id: *mut u32,
) -> MmsfeStatus {
    guard(|| {
        if pixels.is_null() || gt.is_null() || class_id.is_null() {
            return fail(MmsfeStatus::NullPointer, "null argument");
        }
        if size.checked_mul(size).is_none_or(|n| n > capacity) {
            return fail(MmsfeStatus::InvalidArgument, format!("buffer of {capacity} values is smaller than {size}x{size}"));
        }
        let params = PhantomParams::for_size(size);
        match generate_scene(seed, &params) {
            Ok(s) => {
                ptr::copy_nonoverlapping(s.image.as_ptr(), pixels, s.image.len());
                *gt = s.gt.into();
                *class_id = s.class_id as u32;
                MmsfeStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
