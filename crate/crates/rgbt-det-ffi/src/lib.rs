//! C ABI for the RGB-thermal detector: opaque detector handles loaded from
//! checkpoint files, status-code error reporting with a thread-local message,
//! and flat detection arrays the caller frees through this library.
//!
//! The generated header lands in `include/rgbt_det.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::Array4;

use rgbt_det::checkpoint::load_checkpoint;
use rgbt_det::fusion::{self, FusionMode, FusionWeights};
use rgbt_det::network::Model;

/// Call outcome; anything but `Ok` leaves a message in `rgbt_last_error`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RgbtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    IoError = 3,
    BadCheckpoint = 4,
    ShapeMismatch = 5,
    Internal = 6,
}

/// One detection in pixel coordinates of the input image.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RgbtDetection {
    pub class_id: i32,
    pub score: f32,
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

/// Opaque detector handle.
pub struct RgbtDetector {
    model: Model<f32>,
    weights: FusionWeights,
    score_thresh: f64,
    nms_iou: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: RgbtStatus, msg: &str) -> RgbtStatus {
    set_error(msg);
    status
}

fn guard<F: FnOnce() -> RgbtStatus>(f: F) -> RgbtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(RgbtStatus::Internal, "internal panic"),
    }
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rgbt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// ABI version of this library.
#[no_mangle]
pub extern "C" fn rgbt_abi_version() -> u32 {
    1
}

/// Loads a detector from a checkpoint file produced by the `rgbt-det` CLI.
///
/// # Safety
/// `checkpoint_path` must be a NUL-terminated string; `out` must point to
/// writable storage for one pointer. A handle returned here must be released
/// with [`rgbt_detector_free`].
#[no_mangle]
pub unsafe extern "C" fn rgbt_detector_load(
    checkpoint_path: *const c_char,
    out: *mut *mut RgbtDetector,
) -> RgbtStatus {
    guard(|| {
        if checkpoint_path.is_null() || out.is_null() {
            return fail(RgbtStatus::NullPointer, "null argument");
        }
        let path = match unsafe { CStr::from_ptr(checkpoint_path) }.to_str() {
            Ok(s) => s,
            Err(_) => return fail(RgbtStatus::InvalidArgument, "path is not valid UTF-8"),
        };
        match load_checkpoint(Path::new(path)) {
            Ok((model, _)) => {
                let handle = Box::new(RgbtDetector {
                    model,
                    weights: FusionWeights::default(),
                    score_thresh: 0.25,
                    nms_iou: 0.5,
                });
                unsafe { *out = Box::into_raw(handle) };
                RgbtStatus::Ok
            }
            Err(e @ rgbt_det::Error::Checkpoint(_)) => {
                fail(RgbtStatus::BadCheckpoint, &e.to_string())
            }
            Err(e @ rgbt_det::Error::Io { .. }) => fail(RgbtStatus::IoError, &e.to_string()),
            Err(e) => fail(RgbtStatus::Internal, &e.to_string()),
        }
    })
}

/// Releases a detector handle; a null pointer is a no-op.
///
/// # Safety
/// `detector` must have come from [`rgbt_detector_load`] and not been freed.
#[no_mangle]
pub unsafe extern "C" fn rgbt_detector_free(detector: *mut RgbtDetector) {
    if !detector.is_null() {
        drop(unsafe { Box::from_raw(detector) });
    }
}

/// Expected input image height/width in pixels.
///
/// # Safety
/// All pointers must be valid; see [`rgbt_detector_load`].
#[no_mangle]
pub unsafe extern "C" fn rgbt_detector_input_size(
    detector: *const RgbtDetector,
    height: *mut u32,
    width: *mut u32,
) -> RgbtStatus {
    guard(|| {
        if detector.is_null() || height.is_null() || width.is_null() {
            return fail(RgbtStatus::NullPointer, "null argument");
        }
        let d = unsafe { &*detector };
        unsafe {
            *height = d.model.cfg.input_size.0 as u32;
            *width = d.model.cfg.input_size.1 as u32;
        }
        RgbtStatus::Ok
    })
}

/// Sets the decision-fusion branch weights (fusion, visible, thermal).
///
/// # Safety
/// `detector` must be a live handle from [`rgbt_detector_load`].
#[no_mangle]
pub unsafe extern "C" fn rgbt_detector_set_fusion_weights(
    detector: *mut RgbtDetector,
    fusion: f64,
    visible: f64,
    thermal: f64,
) -> RgbtStatus {
    guard(|| {
        if detector.is_null() {
            return fail(RgbtStatus::NullPointer, "null detector");
        }
        let w = FusionWeights {
            fusion,
            visible,
            thermal,
        };
        if let Err(e) = w.validate() {
            return fail(RgbtStatus::InvalidArgument, &e.to_string());
        }
        unsafe { &mut *detector }.weights = w;
        RgbtStatus::Ok
    })
}

/// Sets the detection score threshold and the NMS IoU threshold.
///
/// # Safety
/// `detector` must be a live handle from [`rgbt_detector_load`].
#[no_mangle]
pub unsafe extern "C" fn rgbt_detector_set_thresholds(
    detector: *mut RgbtDetector,
    score_thresh: f64,
    nms_iou: f64,
) -> RgbtStatus {
    guard(|| {
        if detector.is_null() {
            return fail(RgbtStatus::NullPointer, "null detector");
        }
        if !(0.0..=1.0).contains(&score_thresh) || !(0.0..=1.0).contains(&nms_iou) {
            return fail(RgbtStatus::InvalidArgument, "thresholds must lie in [0, 1]");
        }
        let d = unsafe { &mut *detector };
        d.score_thresh = score_thresh;
        d.nms_iou = nms_iou;
        RgbtStatus::Ok
    })
}

/// Runs decision-fused inference on one co-registered pair.
///
/// `visible_rgb` is row-major interleaved RGB (`height*width*3` bytes),
/// `thermal_gray` row-major grayscale (`height*width` bytes); both must match
/// the detector's input size exactly. On success `*out_detections` holds
/// `*out_len` entries to be released with [`rgbt_detections_free`].
///
/// # Safety
/// Buffer pointers must reference at least the stated number of bytes;
/// `out_detections` and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rgbt_detector_predict(
    detector: *const RgbtDetector,
    visible_rgb: *const u8,
    thermal_gray: *const u8,
    height: u32,
    width: u32,
    out_detections: *mut *mut RgbtDetection,
    out_len: *mut usize,
) -> RgbtStatus {
    guard(|| {
        if detector.is_null()
            || visible_rgb.is_null()
            || thermal_gray.is_null()
            || out_detections.is_null()
            || out_len.is_null()
        {
            return fail(RgbtStatus::NullPointer, "null argument");
        }
        let d = unsafe { &*detector };
        let (mh, mw) = d.model.cfg.input_size;
        if (height as usize, width as usize) != (mh, mw) {
            return fail(
                RgbtStatus::ShapeMismatch,
                &format!("detector expects {mh}x{mw} input, got {height}x{width}"),
            );
        }
        let (h, w) = (mh, mw);
        let vis = unsafe { std::slice::from_raw_parts(visible_rgb, h * w * 3) };
        let th = unsafe { std::slice::from_raw_parts(thermal_gray, h * w) };
        let xv = Array4::from_shape_fn((1, 3, h, w), |(_, c, y, x)| {
            vis[(y * w + x) * 3 + c] as f32 / 255.0
        });
        let xt =
            Array4::from_shape_fn((1, 3, h, w), |(_, _, y, x)| th[y * w + x] as f32 / 255.0);
        let lists = match fusion::predict(
            &d.model,
            &xv,
            &xt,
            &d.weights,
            d.score_thresh,
            d.nms_iou,
            FusionMode::SlotWise,
        ) {
            Ok(l) => l,
            Err(e) => return fail(RgbtStatus::Internal, &e.to_string()),
        };
        let dets: Vec<RgbtDetection> = lists[0]
            .iter()
            .map(|det| RgbtDetection {
                class_id: det.class_id as i32,
                score: det.score as f32,
                x1: det.x1 as f32,
                y1: det.y1 as f32,
                x2: det.x2 as f32,
                y2: det.y2 as f32,
            })
            .collect();
        let mut boxed = dets.into_boxed_slice();
        unsafe {
            *out_len = boxed.len();
            *out_detections = if boxed.is_empty() {
                std::ptr::null_mut()
            } else {
                boxed.as_mut_ptr()
            };
        }
        if !boxed.is_empty() {
            std::mem::forget(boxed);
        }
        RgbtStatus::Ok
    })
}

/// Releases a detection array returned by [`rgbt_detector_predict`].
///
/// # Safety
/// `detections`/`len` must be exactly what a successful predict call
/// produced; passing anything else is undefined behavior.
#[no_mangle]
pub unsafe extern "C" fn rgbt_detections_free(detections: *mut RgbtDetection, len: usize) {
    if !detections.is_null() && len > 0 {
        drop(unsafe { Box::from_raw(std::slice::from_raw_parts_mut(detections, len)) });
    }
}
