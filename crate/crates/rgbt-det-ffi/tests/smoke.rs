//! Exercises the C ABI end to end from Rust: load a checkpoint through the
//! extern functions, predict on raw byte buffers, and free everything.

use std::ffi::CString;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rgbt_det::checkpoint::save_checkpoint;
use rgbt_det::network::{Model, NetworkConfig, ShuffleGroups};
use rgbt_det_ffi::*;

fn tiny_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cfg = NetworkConfig::new((64, 64), 3, 4);
    cfg.gsma.shuffle_groups = ShuffleGroups::Count(4);
    let mut model = Model::<f32>::new(&mut rng, cfg).unwrap();
    let path = dir.join("tiny.ckpt");
    save_checkpoint(&mut model, &path, None).unwrap();
    path
}

#[test]
fn load_predict_free_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let c_path = CString::new(ckpt.to_str().unwrap()).unwrap();

    let mut handle: *mut RgbtDetector = std::ptr::null_mut();
    let status = unsafe { rgbt_detector_load(c_path.as_ptr(), &mut handle) };
    assert_eq!(status, RgbtStatus::Ok);
    assert!(!handle.is_null());

    let (mut h, mut w) = (0u32, 0u32);
    assert_eq!(
        unsafe { rgbt_detector_input_size(handle, &mut h, &mut w) },
        RgbtStatus::Ok
    );
    assert_eq!((h, w), (64, 64));

    assert_eq!(
        unsafe { rgbt_detector_set_thresholds(handle, 0.2, 0.5) },
        RgbtStatus::Ok
    );
    assert_eq!(
        unsafe { rgbt_detector_set_fusion_weights(handle, 0.5, 0.25, 0.25) },
        RgbtStatus::Ok
    );
    // invalid weights are rejected with a message
    assert_eq!(
        unsafe { rgbt_detector_set_fusion_weights(handle, 0.0, 0.0, 0.0) },
        RgbtStatus::InvalidArgument
    );
    let msg = unsafe { std::ffi::CStr::from_ptr(rgbt_last_error()) };
    assert!(!msg.to_bytes().is_empty());

    let visible = vec![127u8; 64 * 64 * 3];
    let thermal = vec![40u8; 64 * 64];
    let mut dets: *mut RgbtDetection = std::ptr::null_mut();
    let mut len: usize = 0;
    let status = unsafe {
        rgbt_detector_predict(
            handle,
            visible.as_ptr(),
            thermal.as_ptr(),
            64,
            64,
            &mut dets,
            &mut len,
        )
    };
    assert_eq!(status, RgbtStatus::Ok);
    if len > 0 {
        let slice = unsafe { std::slice::from_raw_parts(dets, len) };
        for d in slice {
            assert!(d.score >= 0.2);
            assert!(d.x1 < d.x2 && d.y1 < d.y2);
            assert!((0..3).contains(&d.class_id));
        }
    }
    unsafe { rgbt_detections_free(dets, len) };

    // wrong input size is a shape error, not a crash
    let status = unsafe {
        rgbt_detector_predict(
            handle,
            visible.as_ptr(),
            thermal.as_ptr(),
            32,
            32,
            &mut dets,
            &mut len,
        )
    };
    assert_eq!(status, RgbtStatus::ShapeMismatch);

    unsafe { rgbt_detector_free(handle) };
    unsafe { rgbt_detector_free(std::ptr::null_mut()) }; // harmless
}

#[test]
fn bad_paths_report_errors() {
    let mut handle: *mut RgbtDetector = std::ptr::null_mut();
    let bogus = CString::new("/definitely/not/here.ckpt").unwrap();
    let status = unsafe { rgbt_detector_load(bogus.as_ptr(), &mut handle) };
    assert_eq!(status, RgbtStatus::IoError);
    assert!(handle.is_null());

    // not a checkpoint
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"garbage").unwrap();
    let c_path = CString::new(junk.to_str().unwrap()).unwrap();
    let status = unsafe { rgbt_detector_load(c_path.as_ptr(), &mut handle) };
    assert_eq!(status, RgbtStatus::BadCheckpoint);

    let status = unsafe { rgbt_detector_load(std::ptr::null(), &mut handle) };
    assert_eq!(status, RgbtStatus::NullPointer);

    assert_eq!(rgbt_abi_version(), 1);
}
