use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use mothwatch::checkpoint;
use mothwatch::classifier::{classify_auto, ClassifierConfig, ClassifierModel};
use mothwatch::config::PipelineOptions;
use mothwatch::detector::{Detector, DetectorArch, DetectorConfig};
use mothwatch::geometry::{iou, nms, BoundingBox, ScoredBox};
use mothwatch::imaging::from_interleaved;
use mothwatch::pipeline::{process_image, Stages};
use mothwatch_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(mw_last_error()) }.to_string_lossy().into_owned()
}

fn gradient_image(w: usize, h: usize) -> Vec<u8> {
    (0..w * h).flat_map(|i| [(i % w * 4) as u8, (i / w * 4) as u8, 128]).collect()
}

struct Fixture {
    _dir: tempfile::TempDir,
    detector: CString,
    classifier: CString,
    det: Detector,
    cfg: DetectorConfig,
    model: ClassifierModel,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DetectorConfig::default();
    let det = Detector::new(DetectorArch::desk(), 3).unwrap();
    let dpath = dir.path().join("detector.json");
    checkpoint::save_detector(&dpath, &det, &cfg).unwrap();
    let ccfg = ClassifierConfig {
        with_parts: false,
        ..ClassifierConfig::default()
    };
    let model = ClassifierModel::new(&ccfg, vec!["alpha".into(), "beta".into(), "gamma".into()], 4).unwrap();
    let cpath = dir.path().join("classifier.json");
    checkpoint::save_classifier(&cpath, &model).unwrap();
    Fixture {
        detector: cstr(&dpath),
        classifier: cstr(&cpath),
        _dir: dir,
        det,
        cfg,
        model,
    }
}

#[test]
fn detector_matches_library() {
    let f = fixture();
    let mut h: *mut MwDetector = ptr::null_mut();
    assert_eq!(unsafe { mw_detector_load(f.detector.as_ptr(), &mut h) }, MwStatus::Ok);
    let rgb = gradient_image(64, 48);
    let mut out = vec![
        MwDetection {
            bbox: MwBox {
                x_min: 0.0,
                y_min: 0.0,
                x_max: 0.0,
                y_max: 0.0
            },
            score: 0.0
        };
        200
    ];
    let mut count = 0usize;
    let st = unsafe { mw_detector_detect(h, rgb.as_ptr(), 64, 48, out.as_mut_ptr(), out.len(), &mut count) };
    assert_eq!(st, MwStatus::Ok, "{}", last_error());
    let want = f.det.detect(&from_interleaved(&rgb, 64, 48).unwrap(), &f.cfg.inference).unwrap();
    assert_eq!(count, want.len());
    for (a, b) in out.iter().zip(&want) {
        assert_eq!((a.bbox.x_min, a.bbox.y_max, a.score), (b.bbox.x_min, b.bbox.y_max, b.score));
    }
    // zero capacity still reports the count
    let mut count2 = usize::MAX;
    assert_eq!(
        unsafe { mw_detector_detect(h, rgb.as_ptr(), 64, 48, ptr::null_mut(), 0, &mut count2) },
        MwStatus::Ok
    );
    assert_eq!(count2, count);
    unsafe { mw_detector_free(h) };
}

#[test]
fn classifier_matches_library() {
    let f = fixture();
    let mut h: *mut MwClassifier = ptr::null_mut();
    assert_eq!(unsafe { mw_classifier_load(f.classifier.as_ptr(), &mut h) }, MwStatus::Ok);
    let rgb = gradient_image(30, 20);
    let (mut class, mut conf) = (usize::MAX, 0.0);
    assert_eq!(
        unsafe { mw_classifier_classify(h, rgb.as_ptr(), 30, 20, &mut class, &mut conf) },
        MwStatus::Ok
    );
    let want = classify_auto(&from_interleaved(&rgb, 30, 20).unwrap(), &f.model).unwrap();
    assert_eq!(class, want.class);
    assert_eq!(conf, want.confidence());
    let mut n = 0usize;
    assert_eq!(unsafe { mw_classifier_num_classes(h, &mut n) }, MwStatus::Ok);
    assert_eq!(n, 3);
    let mut name = ptr::null();
    assert_eq!(unsafe { mw_classifier_class_name(h, 1, &mut name) }, MwStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(name) }.to_str().unwrap(), "beta");
    assert_eq!(unsafe { mw_classifier_class_name(h, 3, &mut name) }, MwStatus::Invalid);
    assert!(last_error().contains("class index 3"));
    unsafe { mw_classifier_free(h) };
}

#[test]
fn pipeline_matches_library() {
    let f = fixture();
    let mut h: *mut MwPipeline = ptr::null_mut();
    assert_eq!(
        unsafe { mw_pipeline_load(f.detector.as_ptr(), f.classifier.as_ptr(), ptr::null(), &mut h) },
        MwStatus::Ok,
        "{}",
        last_error()
    );
    let rgb = gradient_image(64, 64);
    let mut out = vec![
        MwPipelineDetection {
            bbox: MwBox {
                x_min: 0.0,
                y_min: 0.0,
                x_max: 0.0,
                y_max: 0.0
            },
            score: 0.0,
            class_index: 0,
            confidence: 0.0,
        };
        8
    ];
    let mut summary = MwPipelineSummary {
        class_index: 99,
        detections: 0,
        fallback: -1,
    };
    let st = unsafe { mw_pipeline_run(h, rgb.as_ptr(), 64, 64, out.as_mut_ptr(), out.len(), &mut summary) };
    assert_eq!(st, MwStatus::Ok, "{}", last_error());
    let options = PipelineOptions::default();
    let stages = Stages {
        detector: Some(&f.det),
        classifier: &f.model,
        inference: &f.cfg.inference,
        options: &options,
    };
    let want = process_image("x", &from_interleaved(&rgb, 64, 64).unwrap(), &stages).unwrap();
    assert_eq!(summary.class_index, want.label.unwrap());
    assert_eq!(summary.detections, want.detections.len());
    assert_eq!(summary.fallback, want.fallback as i32);
    unsafe { mw_pipeline_free(h) };
}

#[test]
fn errors_are_reported() {
    let mut d: *mut MwDetector = ptr::null_mut();
    let missing = CString::new("/nonexistent/detector.json").unwrap();
    assert_eq!(unsafe { mw_detector_load(missing.as_ptr(), &mut d) }, MwStatus::Io);
    assert!(last_error().contains("/nonexistent/detector.json"));
    assert!(d.is_null());
    assert_eq!(unsafe { mw_detector_load(ptr::null(), &mut d) }, MwStatus::NullArgument);
    assert_eq!(
        unsafe { mw_detector_load(missing.as_ptr(), ptr::null_mut()) },
        MwStatus::NullArgument
    );

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"format\": \"something else\"}").unwrap();
    let mut c: *mut MwClassifier = ptr::null_mut();
    assert_eq!(unsafe { mw_classifier_load(cstr(&bad).as_ptr(), &mut c) }, MwStatus::Invalid);
    assert!(!last_error().is_empty());

    let f = fixture();
    assert_eq!(unsafe { mw_detector_load(f.detector.as_ptr(), &mut d) }, MwStatus::Ok);
    assert_eq!(last_error(), "");
    let mut count = 0;
    let rgb = [0u8; 3];
    assert_eq!(
        unsafe { mw_detector_detect(d, rgb.as_ptr(), 0, 1, ptr::null_mut(), 0, &mut count) },
        MwStatus::Invalid
    );
    assert_eq!(
        unsafe { mw_detector_detect(d, ptr::null(), 1, 1, ptr::null_mut(), 0, &mut count) },
        MwStatus::NullArgument
    );
    unsafe { mw_detector_free(d) };
    unsafe { mw_detector_free(ptr::null_mut()) };
}

#[test]
fn iou_and_nms() {
    let a = MwBox {
        x_min: 0.0,
        y_min: 0.0,
        x_max: 10.0,
        y_max: 10.0,
    };
    let b = MwBox {
        x_min: 5.0,
        y_min: 0.0,
        x_max: 15.0,
        y_max: 10.0,
    };
    let mut v = 0.0;
    assert_eq!(unsafe { mw_iou(&a, &b, &mut v) }, MwStatus::Ok);
    assert!((v - 1.0 / 3.0).abs() < 1e-12);
    let inverted = MwBox {
        x_min: 5.0,
        y_min: 0.0,
        x_max: 1.0,
        y_max: 10.0,
    };
    assert_eq!(unsafe { mw_iou(&a, &inverted, &mut v) }, MwStatus::Invalid);

    let dets: Vec<MwDetection> = [(0.0, 0.9), (1.0, 0.8), (30.0, 0.7), (31.0, 0.95)]
        .iter()
        .map(|&(x, s)| MwDetection {
            bbox: MwBox {
                x_min: x,
                y_min: 0.0,
                x_max: x + 10.0,
                y_max: 10.0,
            },
            score: s,
        })
        .collect();
    let mut out = vec![dets[0]; 4];
    let mut count = 0;
    assert_eq!(
        unsafe { mw_nms(dets.as_ptr(), dets.len(), 0.5, 10, out.as_mut_ptr(), out.len(), &mut count) },
        MwStatus::Ok
    );
    let lib: Vec<ScoredBox> = dets
        .iter()
        .map(|d| {
            ScoredBox::new(
                BoundingBox::new(d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max).unwrap(),
                d.score,
            )
        })
        .collect();
    let want = nms(&lib, 0.5, 10).unwrap();
    assert_eq!(count, 2);
    assert_eq!(count, want.len());
    for (o, w) in out.iter().zip(&want) {
        assert_eq!((o.bbox.x_min, o.score), (w.bbox.x_min, w.score));
    }
    assert!(iou(&want[0].bbox, &want[1].bbox).unwrap() <= 0.5);
    assert_eq!(
        unsafe { mw_nms(dets.as_ptr(), dets.len(), 0.0, 10, out.as_mut_ptr(), 4, &mut count) },
        MwStatus::Invalid
    );
    assert_eq!(
        unsafe { mw_nms(ptr::null(), 0, 0.5, 10, ptr::null_mut(), 0, &mut count) },
        MwStatus::Ok
    );
    assert_eq!(count, 0);
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mothwatch.h")).unwrap();
    for name in [
        "mw_last_error",
        "mw_detector_load",
        "mw_detector_detect",
        "mw_detector_free",
        "mw_classifier_load",
        "mw_classifier_classify",
        "mw_classifier_num_classes",
        "mw_classifier_class_name",
        "mw_classifier_free",
        "mw_pipeline_load",
        "mw_pipeline_run",
        "mw_pipeline_free",
        "mw_iou",
        "mw_nms",
        "typedef struct MwDetector MwDetector",
        "MW_STATUS_PANIC = 5",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Some(cc) = ["cc", "clang", "gcc"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler found; header compile check skipped");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"mothwatch.h\"\nint main(void) { MwBox a = {0, 0, 1, 1}; double v; return mw_iou(&a, &a, &v) == MW_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let out = std::process::Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-fsyntax-only")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
