//! C ABI over `aod-core`.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free`. Every fallible call returns an [`AodStatus`]; on
//! failure `aod_last_error_message` describes the error (per thread).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use aod::aodnet::{AodConfig, AodParams};
use aod::backbone::extract_features;
use aod::data::{generate_dataset, load_dataset, save_dataset, Dataset, SceneConfig};
use aod::diffcore::{Checkpoint, Tensor};
use aod::eval::{detect_image, DetectConfig};
use aod::trainer::load_network;
use aod::{AodError, BoundingBox};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AodStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Numeric = 6,
    Mismatch = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// One detection, corners in pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AodDetection {
    pub class_id: u32,
    pub score: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// A trained network loaded from a checkpoint.
pub struct AodDetector {
    config: AodConfig,
    params: AodParams<f32>,
}

/// A synthetic dataset.
pub struct AodDataset {
    inner: Dataset,
    /// Corner-form proposals per image, lent out by `aod_dataset_image`.
    corners: Vec<Vec<f64>>,
}

impl AodDataset {
    fn new(inner: Dataset) -> Self {
        let corners = inner
            .images
            .iter()
            .map(|img| img.proposals.iter().flat_map(|b| b.corners()).collect())
            .collect();
        AodDataset { inner, corners }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &AodError) -> AodStatus {
    match e {
        AodError::Io(_) => AodStatus::Io,
        AodError::Parse { .. } | AodError::Json(_) | AodError::SchemaVersion { .. } => AodStatus::Parse,
        AodError::Config { .. } => AodStatus::Config,
        AodError::NonFinite(_) | AodError::NonFiniteGradient(_) | AodError::Divergence { .. } => AodStatus::Numeric,
        AodError::CheckpointMismatch(_) => AodStatus::Mismatch,
        _ => AodStatus::InvalidArgument,
    }
}

struct Fail(AodStatus, String);

impl From<AodError> for Fail {
    fn from(e: AodError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AodStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AodStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AodStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(AodStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(AodStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn aod_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aod_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Intersection over union of two corner boxes `[x1, y1, x2, y2]`; negative
/// when either box is invalid.
///
/// # Safety
/// `a` and `b` must point to four readable doubles.
#[no_mangle]
pub unsafe extern "C" fn aod_iou(a: *const f64, b: *const f64) -> f64 {
    if a.is_null() || b.is_null() {
        return -1.0;
    }
    let (a, b) = (std::slice::from_raw_parts(a, 4), std::slice::from_raw_parts(b, 4));
    match (
        BoundingBox::from_corners(a[0], a[1], a[2], a[3]),
        BoundingBox::from_corners(b[0], b[1], b[2], b[3]),
    ) {
        (Ok(x), Ok(y)) => aod::geometry::iou(&x, &y),
        _ => -1.0,
    }
}

/// Loads a checkpoint written by `aod train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aod_detector_load(path: *const c_char, out: *mut *mut AodDetector) -> AodStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::load(&path_arg(path, "path")?)?;
        let (config, params) = load_network::<f32>(&ck)?;
        *out = Box::into_raw(Box::new(AodDetector { config, params }));
        Ok(())
    })
}

/// # Safety
/// `det` must come from `aod_detector_load` (or be null) and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn aod_detector_free(det: *mut AodDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Foreground class count `K`, 0 for a null handle.
///
/// # Safety
/// `det` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn aod_detector_num_classes(det: *const AodDetector) -> u32 {
    det.as_ref().map_or(0, |d| d.config.num_classes as u32)
}

/// Glimpse steps `T`, 0 for a null handle.
///
/// # Safety
/// `det` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn aod_detector_steps(det: *const AodDetector) -> u32 {
    det.as_ref().map_or(0, |d| d.config.steps as u32)
}

/// Detects objects in a `[channels, height, width]` float image (values in
/// `[0, 1]`) given `n_proposals` corner boxes (`4 * n` doubles). Writes up to
/// `capacity` detections and their total number into `out_count`; returns
/// `BUFFER_TOO_SMALL` (with `out_count` set) when they do not fit.
///
/// # Safety
/// All pointers must be valid for the stated lengths; `out` may be null
/// when `capacity` is 0.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn aod_detect(
    det: *const AodDetector,
    pixels: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    proposals: *const f64,
    n_proposals: usize,
    score_thresh: f64,
    nms_thresh: f64,
    out: *mut AodDetection,
    capacity: usize,
    out_count: *mut usize,
) -> AodStatus {
    guard(|| {
        let d = det.as_ref().ok_or_else(|| null("detector"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if out_count.is_null() {
            return Err(null("out_count"));
        }
        if n_proposals > 0 && proposals.is_null() {
            return Err(null("proposals"));
        }
        if capacity > 0 && out.is_null() {
            return Err(null("out"));
        }
        if channels != d.config.backbone.in_channels {
            return Err(Fail(
                AodStatus::Mismatch,
                format!("network expects {} channels", d.config.backbone.in_channels),
            ));
        }
        let n = channels * height * width;
        let image = Tensor::new(vec![channels, height, width], std::slice::from_raw_parts(pixels, n).to_vec())?;
        let raw = if n_proposals == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(proposals, 4 * n_proposals)
        };
        let boxes = raw
            .chunks_exact(4)
            .map(|c| BoundingBox::from_corners(c[0], c[1], c[2], c[3]))
            .collect::<aod::Result<Vec<_>>>()?;
        let cfg = DetectConfig {
            score_thresh,
            nms_thresh,
        };
        let (fm, _) = extract_features(&image, &d.config.backbone, &d.params.backbone)?;
        let found = detect_image(&fm, (height, width), &boxes, &d.params, &d.config, &cfg, 0)?;
        *out_count = found.len();
        if found.len() > capacity {
            return Err(Fail(
                AodStatus::BufferTooSmall,
                format!("{} detections, capacity {capacity}", found.len()),
            ));
        }
        for (i, f) in found.iter().enumerate() {
            let [x1, y1, x2, y2] = f.bbox.corners();
            *out.add(i) = AodDetection {
                class_id: f.class as u32,
                score: f.score,
                x1,
                y1,
                x2,
                y2,
            };
        }
        Ok(())
    })
}

/// Generates `n_images` synthetic scenes with the default scene settings
/// apart from the given fields.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aod_dataset_generate(
    num_classes: u32,
    image_size: u32,
    n_images: u32,
    seed: u64,
    context_cue: bool,
    out: *mut *mut AodDataset,
) -> AodStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = SceneConfig {
            num_classes: num_classes as usize,
            image_size: image_size as usize,
            seed,
            context_cue,
            ..SceneConfig::default()
        };
        let inner = generate_dataset(&cfg, n_images as usize)?;
        *out = Box::into_raw(Box::new(AodDataset::new(inner)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aod_dataset_load(path: *const c_char, out: *mut *mut AodDataset) -> AodStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = load_dataset(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(AodDataset::new(inner)));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn aod_dataset_save(ds: *const AodDataset, path: *const c_char) -> AodStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        save_dataset(&ds.inner, &path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Number of images, 0 for a null handle.
///
/// # Safety
/// `ds` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn aod_dataset_len(ds: *const AodDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.images.len())
}

/// Image `index` as `[channels, height, width]`; `pixels` and `proposals`
/// borrow from the handle. Proposals are corner boxes, `4 * n` doubles.
///
/// # Safety
/// `ds` must be a live handle; every out pointer must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn aod_dataset_image(
    ds: *const AodDataset,
    index: usize,
    pixels: *mut *const f32,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
    proposals: *mut *const f64,
    n_proposals: *mut usize,
) -> AodStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        if [pixels.is_null(), proposals.is_null()].contains(&true)
            || [channels, height, width, n_proposals].iter().any(|p| p.is_null())
        {
            return Err(null("output pointer"));
        }
        let img = ds.inner.images.get(index).ok_or_else(|| {
            Fail(
                AodStatus::InvalidArgument,
                format!("index {index} out of range ({} images)", ds.inner.images.len()),
            )
        })?;
        let shape = img.image.shape();
        *pixels = img.image.data().as_ptr();
        *channels = shape[0];
        *height = shape[1];
        *width = shape[2];
        *proposals = ds.corners[index].as_ptr();
        *n_proposals = img.proposals.len();
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn aod_dataset_free(ds: *mut AodDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}
