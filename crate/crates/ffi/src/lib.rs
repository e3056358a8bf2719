//! C ABI over the mothwatch detector, classifier and two-stage pipeline.
//!
//! Every function returns an [`MwStatus`]; on failure [`mw_last_error`]
//! describes the most recent error on the calling thread. Handles are opaque
//! and must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mothwatch::checkpoint;
use mothwatch::classifier::{classify_auto, ClassifierModel};
use mothwatch::config::{PipelineConfig, PipelineOptions};
use mothwatch::detector::{Detector, InferenceConfig};
use mothwatch::error::Error;
use mothwatch::geometry::{nms, BoundingBox, ScoredBox};
use mothwatch::imaging::from_interleaved;
use mothwatch::nn::Tensor3;
use mothwatch::pipeline::{process_image, Stages};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MwStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Bad input: a malformed argument, box, config or checkpoint.
    Invalid = 2,
    /// A file could not be found or read.
    Io = 3,
    /// The computation itself failed.
    Runtime = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

/// Pixel-space box `[x_min, x_max) x [y_min, y_max)`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MwBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MwDetection {
    pub bbox: MwBox,
    pub score: f64,
}

/// One classified detection of a pipeline run.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MwPipelineDetection {
    pub bbox: MwBox,
    pub score: f64,
    pub class_index: usize,
    pub confidence: f64,
}

/// Image-level outcome of a pipeline run.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MwPipelineSummary {
    pub class_index: usize,
    /// Number of detections; may exceed the capacity passed in.
    pub detections: usize,
    /// 1 when nothing was detected and the full image was classified.
    pub fallback: i32,
}

pub struct MwDetector {
    detector: Detector,
    inference: InferenceConfig,
}

pub struct MwClassifier {
    model: ClassifierModel,
    names: Vec<CString>,
}

pub struct MwPipeline {
    detector: MwDetector,
    classifier: MwClassifier,
    options: PipelineOptions,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(MwStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::MissingFile(_) | Error::Io { .. } | Error::Image { .. } => MwStatus::Io,
            e if e.is_validation() => MwStatus::Invalid,
            _ => MwStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MwStatus::Invalid, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MwStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("panic: {msg}"));
            MwStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(MwStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    non_null(p, name)?;
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{name} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn image_arg(rgb: *const u8, width: usize, height: usize) -> Result<Tensor3, Failure> {
    non_null(rgb, "rgb")?;
    if width == 0 || height == 0 {
        return Err(invalid(format!("image size {width}x{height} is empty")));
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| invalid("image size overflows"))?;
    let bytes = std::slice::from_raw_parts(rgb, len);
    from_interleaved(bytes, width, height).ok_or_else(|| invalid("pixel buffer size mismatch"))
}

fn to_c_box(b: &BoundingBox) -> MwBox {
    MwBox {
        x_min: b.x_min,
        y_min: b.y_min,
        x_max: b.x_max,
        y_max: b.y_max,
    }
}

fn from_c_box(b: &MwBox) -> Result<BoundingBox, Failure> {
    BoundingBox::new(b.x_min, b.y_min, b.x_max, b.y_max).map_err(|e| invalid(e.to_string()))
}

unsafe fn write_out<T: Copy>(items: &[T], out: *mut T, capacity: usize) -> Result<(), Failure> {
    let n = items.len().min(capacity);
    if n > 0 {
        non_null(out, "out")?;
        std::ptr::copy_nonoverlapping(items.as_ptr(), out, n);
    }
    Ok(())
}

fn load_detector(path: &std::path::Path) -> Result<MwDetector, Failure> {
    let (detector, cfg) = checkpoint::load_detector(path)?;
    Ok(MwDetector {
        detector,
        inference: cfg.inference,
    })
}

fn load_classifier(path: &std::path::Path) -> Result<MwClassifier, Failure> {
    let model = checkpoint::load_classifier(path)?;
    let names = model
        .classes
        .iter()
        .map(|c| CString::new(c.replace('\0', " ")).unwrap_or_default())
        .collect();
    Ok(MwClassifier { model, names })
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mw_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a detector checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mw_detector_load(path: *const c_char, out: *mut *mut MwDetector) -> MwStatus {
    guard(|| {
        non_null(out, "out")?;
        let det = load_detector(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(det));
        Ok(())
    })
}

/// Detect moths in a row-major interleaved RGB image.
///
/// Up to `capacity` detections are written to `out`; `count` receives the
/// total number found.
///
/// # Safety
/// `rgb` must hold `3 * width * height` bytes, `out` room for `capacity`
/// detections, and `det` must come from [`mw_detector_load`].
#[no_mangle]
pub unsafe extern "C" fn mw_detector_detect(
    det: *const MwDetector,
    rgb: *const u8,
    width: usize,
    height: usize,
    out: *mut MwDetection,
    capacity: usize,
    count: *mut usize,
) -> MwStatus {
    guard(|| {
        non_null(det, "detector")?;
        non_null(count, "count")?;
        let det = &*det;
        let img = image_arg(rgb, width, height)?;
        let found = det
            .detector
            .detect(&img, &det.inference)
            .map_err(|e| Failure::from(Error::from(e)))?;
        let items: Vec<MwDetection> = found
            .iter()
            .map(|d| MwDetection {
                bbox: to_c_box(&d.bbox),
                score: d.score,
            })
            .collect();
        write_out(&items, out, capacity)?;
        *count = items.len();
        Ok(())
    })
}

/// # Safety
/// `det` must be null or come from [`mw_detector_load`], and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mw_detector_free(det: *mut MwDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Load a classifier checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mw_classifier_load(path: *const c_char, out: *mut *mut MwClassifier) -> MwStatus {
    guard(|| {
        non_null(out, "out")?;
        let clf = load_classifier(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(clf));
        Ok(())
    })
}

/// Classify a cropped RGB image, mining parts when the model has a selector.
///
/// # Safety
/// `rgb` must hold `3 * width * height` bytes; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mw_classifier_classify(
    clf: *const MwClassifier,
    rgb: *const u8,
    width: usize,
    height: usize,
    class_index: *mut usize,
    confidence: *mut f64,
) -> MwStatus {
    guard(|| {
        non_null(clf, "classifier")?;
        non_null(class_index, "class_index")?;
        non_null(confidence, "confidence")?;
        let img = image_arg(rgb, width, height)?;
        let pred = classify_auto(&img, &(*clf).model).map_err(|e| Failure::from(Error::from(e)))?;
        *class_index = pred.class;
        *confidence = pred.confidence();
        Ok(())
    })
}

/// Number of species the classifier knows.
///
/// # Safety
/// `clf` must come from [`mw_classifier_load`]; `count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mw_classifier_num_classes(clf: *const MwClassifier, count: *mut usize) -> MwStatus {
    guard(|| {
        non_null(clf, "classifier")?;
        non_null(count, "count")?;
        *count = (*clf).names.len();
        Ok(())
    })
}

/// Species name of a class index; the string lives as long as the handle.
///
/// # Safety
/// `clf` must come from [`mw_classifier_load`]; `name` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mw_classifier_class_name(clf: *const MwClassifier, index: usize, name: *mut *const c_char) -> MwStatus {
    guard(|| {
        non_null(clf, "classifier")?;
        non_null(name, "name")?;
        let names = &(*clf).names;
        let n = names
            .get(index)
            .ok_or_else(|| invalid(format!("class index {index} outside 0..{}", names.len())))?;
        *name = n.as_ptr();
        Ok(())
    })
}

/// # Safety
/// `clf` must be null or come from [`mw_classifier_load`], and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mw_classifier_free(clf: *mut MwClassifier) {
    if !clf.is_null() {
        drop(Box::from_raw(clf));
    }
}

/// Load both checkpoints and, optionally, a TOML config for the pipeline
/// options (`config` may be null for the defaults).
///
/// # Safety
/// Paths must be NUL-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mw_pipeline_load(
    detector_path: *const c_char,
    classifier_path: *const c_char,
    config: *const c_char,
    out: *mut *mut MwPipeline,
) -> MwStatus {
    guard(|| {
        non_null(out, "out")?;
        let detector = load_detector(&path_arg(detector_path, "detector_path")?)?;
        let classifier = load_classifier(&path_arg(classifier_path, "classifier_path")?)?;
        let options = if config.is_null() {
            PipelineOptions::default()
        } else {
            PipelineConfig::load(Some(&path_arg(config, "config")?))?.pipeline
        };
        *out = Box::into_raw(Box::new(MwPipeline {
            detector,
            classifier,
            options,
        }));
        Ok(())
    })
}

/// Detect, crop, classify and reduce one RGB image.
///
/// # Safety
/// `rgb` must hold `3 * width * height` bytes, `out` room for `capacity`
/// entries, and `summary` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mw_pipeline_run(
    pipeline: *const MwPipeline,
    rgb: *const u8,
    width: usize,
    height: usize,
    out: *mut MwPipelineDetection,
    capacity: usize,
    summary: *mut MwPipelineSummary,
) -> MwStatus {
    guard(|| {
        non_null(pipeline, "pipeline")?;
        non_null(summary, "summary")?;
        let p = &*pipeline;
        let img = image_arg(rgb, width, height)?;
        let stages = Stages {
            detector: Some(&p.detector.detector),
            classifier: &p.classifier.model,
            inference: &p.detector.inference,
            options: &p.options,
        };
        let r = process_image("ffi", &img, &stages)?;
        let items: Vec<MwPipelineDetection> = r
            .detections
            .iter()
            .map(|d| MwPipelineDetection {
                bbox: to_c_box(&d.bbox),
                score: d.score,
                class_index: d.prediction.class,
                confidence: d.prediction.confidence(),
            })
            .collect();
        write_out(&items, out, capacity)?;
        *summary = MwPipelineSummary {
            class_index: r.label.unwrap_or(0),
            detections: items.len(),
            fallback: r.fallback as i32,
        };
        Ok(())
    })
}

/// # Safety
/// `pipeline` must be null or come from [`mw_pipeline_load`], and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mw_pipeline_free(pipeline: *mut MwPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Intersection over union of two boxes.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mw_iou(a: *const MwBox, b: *const MwBox, out: *mut f64) -> MwStatus {
    guard(|| {
        non_null(a, "a")?;
        non_null(b, "b")?;
        non_null(out, "out")?;
        *out = mothwatch::geometry::iou(&from_c_box(&*a)?, &from_c_box(&*b)?).map_err(|e| invalid(e.to_string()))?;
        Ok(())
    })
}

/// Greedy non-maximum suppression; survivors are written in score order.
///
/// # Safety
/// `boxes` must hold `n` entries, `out` room for `capacity`; `count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mw_nms(
    boxes: *const MwDetection,
    n: usize,
    iou_threshold: f64,
    max_keep: usize,
    out: *mut MwDetection,
    capacity: usize,
    count: *mut usize,
) -> MwStatus {
    guard(|| {
        non_null(count, "count")?;
        let input: &[MwDetection] = if n == 0 {
            &[]
        } else {
            non_null(boxes, "boxes")?;
            std::slice::from_raw_parts(boxes, n)
        };
        let scored = input
            .iter()
            .map(|d| Ok(ScoredBox::new(from_c_box(&d.bbox)?, d.score)))
            .collect::<Result<Vec<_>, Failure>>()?;
        let kept = nms(&scored, iou_threshold, max_keep).map_err(|e| invalid(e.to_string()))?;
        let items: Vec<MwDetection> = kept
            .iter()
            .map(|d| MwDetection {
                bbox: to_c_box(&d.bbox),
                score: d.score,
            })
            .collect();
        write_out(&items, out, capacity)?;
        *count = items.len();
        Ok(())
    })
}
