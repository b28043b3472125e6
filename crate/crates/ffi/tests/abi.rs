use std::ffi::{CStr, CString};
use std::ptr;

use aod::aodnet::{init_params, AodConfig};
use aod::trainer::{TrainConfig, TrainState};
use aod_ffi::*;

fn last_error() -> String {
    let p = aod_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn write_checkpoint(dir: &std::path::Path) -> CString {
    let mut cfg = TrainConfig::default();
    cfg.aod = AodConfig {
        num_classes: 3,
        steps: 2,
        ..AodConfig::default()
    };
    let mut state = TrainState::<f32>::new(&cfg).unwrap();
    state.params = init_params(&cfg.aod, 9).unwrap();
    let path = dir.join("ck.json");
    state.checkpoint(&cfg).unwrap().save(&path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn detector_round_trip_and_detect() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_checkpoint(dir.path());
    let mut det = ptr::null_mut();
    unsafe {
        assert_eq!(aod_detector_load(path.as_ptr(), &mut det), AodStatus::Ok);
        assert_eq!(aod_detector_num_classes(det), 3);
        assert_eq!(aod_detector_steps(det), 2);

        let pixels = vec![0.25f32; 48 * 48];
        let proposals = [4.0, 4.0, 24.0, 24.0, 10.0, 12.0, 40.0, 36.0];
        let mut count = 0usize;
        // Size query with no buffer.
        let s = aod_detect(
            det,
            pixels.as_ptr(),
            1,
            48,
            48,
            proposals.as_ptr(),
            2,
            0.0,
            0.3,
            ptr::null_mut(),
            0,
            &mut count,
        );
        assert!(s == AodStatus::Ok || s == AodStatus::BufferTooSmall);
        assert!(count >= 1, "score threshold 0 keeps at least one box per class");
        let mut out = vec![AodDetection::default(); count];
        let s = aod_detect(
            det,
            pixels.as_ptr(),
            1,
            48,
            48,
            proposals.as_ptr(),
            2,
            0.0,
            0.3,
            out.as_mut_ptr(),
            out.len(),
            &mut count,
        );
        assert_eq!(s, AodStatus::Ok);
        assert_eq!(count, out.len());
        for d in &out {
            assert!(d.class_id < 3);
            assert!((0.0..=1.0).contains(&d.score));
            assert!(d.x1 < d.x2 && d.y1 < d.y2);
            assert!(d.x1 >= 0.0 && d.y2 <= 48.0);
        }

        let s = aod_detect(
            det,
            pixels.as_ptr(),
            3,
            16,
            16,
            proposals.as_ptr(),
            2,
            0.0,
            0.3,
            ptr::null_mut(),
            0,
            &mut count,
        );
        assert_eq!(s, AodStatus::Mismatch);
        assert!(last_error().contains("channels"));
        aod_detector_free(det);
    }
}

#[test]
fn error_codes_and_messages() {
    let mut det = ptr::null_mut();
    unsafe {
        assert_eq!(aod_detector_load(ptr::null(), &mut det), AodStatus::NullPointer);
        assert!(last_error().contains("path"));
        let missing = CString::new("/nonexistent/ck.json").unwrap();
        assert_eq!(aod_detector_load(missing.as_ptr(), &mut det), AodStatus::Io);
        assert!(det.is_null());

        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{ not json").unwrap();
        let bad = CString::new(bad.to_str().unwrap()).unwrap();
        assert_eq!(aod_detector_load(bad.as_ptr(), &mut det), AodStatus::Parse);

        // Success clears the message.
        let mut ds = ptr::null_mut();
        assert_eq!(aod_dataset_generate(2, 48, 1, 0, false, &mut ds), AodStatus::Ok);
        assert!(aod_last_error_message().is_null());
        aod_dataset_free(ds);

        assert_eq!(aod_dataset_generate(0, 48, 1, 0, false, &mut ds), AodStatus::Config);
        aod_detector_free(ptr::null_mut());
        aod_dataset_free(ptr::null_mut());
    }
}

#[test]
fn dataset_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("ds.json").to_str().unwrap()).unwrap();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(aod_dataset_generate(5, 48, 3, 7, true, &mut ds), AodStatus::Ok);
        assert_eq!(aod_dataset_len(ds), 3);
        assert_eq!(aod_dataset_save(ds, path.as_ptr()), AodStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(aod_dataset_load(path.as_ptr(), &mut back), AodStatus::Ok);
        assert_eq!(aod_dataset_len(back), 3);

        let (mut px, mut c, mut h, mut w, mut props, mut n) = (ptr::null(), 0, 0, 0, ptr::null(), 0);
        let s = aod_dataset_image(back, 1, &mut px, &mut c, &mut h, &mut w, &mut props, &mut n);
        assert_eq!(s, AodStatus::Ok);
        assert_eq!((c, h, w), (1, 48, 48));
        assert!(n > 0);
        let corners = std::slice::from_raw_parts(props, 4 * n);
        assert!(corners.chunks(4).all(|b| b[0] < b[2] && b[1] < b[3]));
        let s = aod_dataset_image(back, 3, &mut px, &mut c, &mut h, &mut w, &mut props, &mut n);
        assert_eq!(s, AodStatus::InvalidArgument);
        aod_dataset_free(ds);
        aod_dataset_free(back);
    }
}

#[test]
fn iou_and_version() {
    let a = [0.0, 0.0, 10.0, 10.0];
    let b = [5.0, 0.0, 15.0, 10.0];
    let v = unsafe { aod_iou(a.as_ptr(), b.as_ptr()) };
    assert!((v - 50.0 / 150.0).abs() < 1e-12);
    let inverted = [3.0, 3.0, 1.0, 1.0];
    assert_eq!(unsafe { aod_iou(a.as_ptr(), inverted.as_ptr()) }, -1.0);
    let ver = unsafe { CStr::from_ptr(aod_version()) }.to_str().unwrap();
    assert_eq!(ver, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/aod.h")).unwrap();
    for f in [
        "aod_last_error_message",
        "aod_version",
        "aod_iou",
        "aod_detector_load",
        "aod_detector_free",
        "aod_detector_num_classes",
        "aod_detector_steps",
        "aod_detect",
        "aod_dataset_generate",
        "aod_dataset_load",
        "aod_dataset_save",
        "aod_dataset_len",
        "aod_dataset_image",
        "aod_dataset_free",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct AodDetector AodDetector;"));
    assert!(header.contains("AOD_STATUS_BUFFER_TOO_SMALL = 8"));
}
