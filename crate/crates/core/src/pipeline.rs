//! Detector followed by the part-based classifier, plus the evaluation
//! harnesses built on top of it.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{classify_auto, ClassificationSample, ClassifierModel, Prediction};
use crate::config::{PipelineConfig, PipelineOptions, Reduction};
use crate::data::DatasetIndex;
use crate::detector::{train_detector, DetectionSample, Detector, InferenceConfig};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, ScoredBox};
use crate::imaging::{crop_window, pixel_window, to_tensor};
use crate::metrics::{
    accuracy, average_precision, cross_subset_protocol, macro_f1, mean_std, ApMethod, ClassSplit, CrossSubsetResult, EvalRecord,
    MetricsReport, PrCurve,
};
use crate::nn::Tensor3;

/// Ground-truth detection samples of a dataset, in pixel coordinates.
pub fn detection_samples(index: &DatasetIndex) -> Result<Vec<DetectionSample>> {
    index
        .entries
        .iter()
        .map(|e| {
            Ok(DetectionSample {
                image: to_tensor(&index.load_image(e)?),
                boxes: e.pixel_boxes(),
            })
        })
        .collect()
}

/// Crop `b` grown by `padding`, clipped to the image. Returns the crop and its origin.
pub fn padded_crop(image: &Tensor3, b: &BoundingBox, padding: f64) -> (Tensor3, (usize, usize)) {
    let padded = b.pad(padding).clip(image.width as f64, image.height as f64);
    let (x0, y0, x1, y1) = pixel_window(&padded, image.width, image.height);
    (crop_window(image, x0, y0, x1, y1), (x0, y0))
}

/// One padded ground-truth crop per box.
pub fn classification_samples(index: &DatasetIndex, padding: f64) -> Result<Vec<ClassificationSample>> {
    let mut out = Vec::new();
    for e in &index.entries {
        let img = to_tensor(&index.load_image(e)?);
        for b in &e.boxes {
            out.push(ClassificationSample {
                image: padded_crop(&img, &b.bbox, padding).0,
                label: b.class,
            });
        }
    }
    Ok(out)
}

/// Whole (uncropped) images with their image-level labels.
pub fn full_image_samples(index: &DatasetIndex) -> Result<Vec<ClassificationSample>> {
    index
        .entries
        .iter()
        .map(|e| {
            let label = e
                .label
                .ok_or_else(|| Error::Invalid(format!("image {} has no species label", e.path)))?;
            Ok(ClassificationSample {
                image: to_tensor(&index.load_image(e)?),
                label,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub enum ImageSource {
    Path(PathBuf),
    Pixels(Arc<RgbImage>),
}

#[derive(Debug, Clone)]
pub struct InputImage {
    pub id: String,
    pub source: ImageSource,
}

impl InputImage {
    pub fn load(&self) -> std::result::Result<Tensor3, String> {
        match &self.source {
            ImageSource::Pixels(p) => Ok(to_tensor(p)),
            ImageSource::Path(p) => image::open(p)
                .map(|i| to_tensor(&i.to_rgb8()))
                .map_err(|e| format!("cannot read {}: {e}", p.display())),
        }
    }
}

pub fn inputs_from_index(index: &DatasetIndex) -> Vec<InputImage> {
    index
        .entries
        .iter()
        .map(|e| InputImage {
            id: e.path.clone(),
            source: match (&e.pixels, &index.root) {
                (Some(p), _) => ImageSource::Pixels(p.clone()),
                (None, Some(root)) => ImageSource::Path(root.join(&e.path)),
                (None, None) => ImageSource::Path(PathBuf::from(&e.path)),
            },
        })
        .collect()
}

/// Every `.png`, `.jpg` and `.jpeg` file directly inside `dir`, sorted by name.
pub fn inputs_from_dir(dir: &Path) -> Result<Vec<InputImage>> {
    if !dir.exists() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    Ok(paths
        .into_iter()
        .map(|p| InputImage {
            id: p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            source: ImageSource::Path(p),
        })
        .collect())
}

/// The two trained stages and the options that drive them.
#[derive(Clone, Copy)]
pub struct Stages<'a> {
    pub detector: Option<&'a Detector>,
    pub classifier: &'a ClassifierModel,
    pub inference: &'a InferenceConfig,
    pub options: &'a PipelineOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub bbox: BoundingBox,
    pub score: f64,
    pub species: String,
    /// Prediction on the padded crop; part boxes are in image coordinates.
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub id: String,
    pub detections: Vec<DetectionResult>,
    /// The detector ran but nothing cleared the score threshold.
    pub fallback: bool,
    /// Prediction on the uncropped image (fallback or detector disabled).
    pub full_image: Option<Prediction>,
    pub label: Option<usize>,
    pub species: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub images: Vec<ImageResult>,
    pub metrics: MetricsReport,
}

impl PipelineResult {
    /// One JSON record per image.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.images {
            s.push_str(&serde_json::to_string(r).expect("results serialize"));
            s.push('\n');
        }
        s
    }

    /// `id, species, confidence, detections, fallback, error` per image.
    pub fn summary_tsv(&self) -> String {
        let mut s = String::from("id\tspecies\tconfidence\tdetections\tfallback\terror\n");
        for r in &self.images {
            let conf = final_confidence(r).map(|c| format!("{c:.6}")).unwrap_or_default();
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.species.as_deref().unwrap_or(""),
                conf,
                r.detections.len(),
                r.fallback,
                r.error.as_deref().unwrap_or("")
            ));
        }
        s
    }
}

fn final_confidence(r: &ImageResult) -> Option<f64> {
    let label = r.label?;
    if let Some(p) = &r.full_image {
        return Some(p.probabilities.combined[label]);
    }
    r.detections
        .iter()
        .filter(|d| d.prediction.class == label)
        .map(|d| d.prediction.confidence())
        .fold(None, |m: Option<f64>, c| Some(m.map_or(c, |m| m.max(c))))
}

/// Per-detection labels to one label. Detections arrive in descending score order.
fn reduce(detections: &[DetectionResult], reduction: Reduction, num_classes: usize) -> usize {
    match reduction {
        Reduction::HighestConfidence => detections[0].prediction.class,
        Reduction::MajorityVote => {
            let mut votes = vec![(0usize, 0.0f64); num_classes];
            for d in detections {
                votes[d.prediction.class].0 += 1;
                votes[d.prediction.class].1 += d.score;
            }
            let mut best = 0;
            for c in 1..num_classes {
                let (n, s) = votes[c];
                let (bn, bs) = votes[best];
                if n > bn || (n == bn && s > bs) {
                    best = c;
                }
            }
            best
        }
    }
}

fn shift_parts(mut p: Prediction, origin: (usize, usize)) -> Prediction {
    for b in p.parts.iter_mut() {
        *b = b.translate(origin.0 as f64, origin.1 as f64);
    }
    p
}

/// Detect, crop, classify and reduce one image.
pub fn process_image(id: &str, image: &Tensor3, stages: &Stages) -> Result<ImageResult> {
    let names = &stages.classifier.classes;
    let mut result = ImageResult {
        id: id.to_string(),
        detections: Vec::new(),
        fallback: false,
        full_image: None,
        label: None,
        species: None,
        error: None,
    };
    let boxes: Vec<ScoredBox> = match stages.detector {
        Some(det) if stages.options.use_detector => det.detect(image, stages.inference)?,
        _ => Vec::new(),
    };
    for sb in &boxes {
        let (crop, origin) = padded_crop(image, &sb.bbox, stages.options.crop_padding);
        let pred = shift_parts(classify_auto(&crop, stages.classifier)?, origin);
        result.detections.push(DetectionResult {
            bbox: sb.bbox,
            score: sb.score,
            species: names[pred.class].clone(),
            prediction: pred,
        });
    }
    let label = if result.detections.is_empty() {
        let detector_ran = stages.detector.is_some() && stages.options.use_detector;
        if detector_ran {
            log::info!(
                "{id}: no detection above {}; classifying the full image",
                stages.inference.score_threshold
            );
        }
        result.fallback = detector_ran;
        let pred = classify_auto(image, stages.classifier)?;
        let c = pred.class;
        result.full_image = Some(pred);
        c
    } else {
        reduce(&result.detections, stages.options.reduction, names.len())
    };
    result.label = Some(label);
    result.species = Some(names[label].clone());
    Ok(result)
}

fn error_record(id: &str, msg: String) -> ImageResult {
    log::warn!("{id}: {msg}");
    ImageResult {
        id: id.to_string(),
        detections: Vec::new(),
        fallback: false,
        full_image: None,
        label: None,
        species: None,
        error: Some(msg),
    }
}

/// Run both stages over every input. Unreadable images become error records.
pub fn run_pipeline(inputs: &[InputImage], stages: &Stages) -> PipelineResult {
    let images: Vec<ImageResult> = inputs
        .par_iter()
        .map(|inp| match inp.load() {
            Ok(img) => process_image(&inp.id, &img, stages).unwrap_or_else(|e| error_record(&inp.id, e.to_string())),
            Err(msg) => error_record(&inp.id, msg),
        })
        .collect();
    let n = images.len();
    let errors = images.iter().filter(|r| r.error.is_some()).count();
    let fallbacks = images.iter().filter(|r| r.fallback).count();
    let dets: usize = images.iter().map(|r| r.detections.len()).sum();
    let mut metrics = MetricsReport::new("pipeline run");
    metrics.push("images", n as f64);
    metrics.push("errors", errors as f64);
    metrics.push("fallbacks", fallbacks as f64);
    metrics.push("fallback_rate", if n > 0 { fallbacks as f64 / n as f64 } else { 0.0 });
    metrics.push("mean_detections", if n > 0 { dets as f64 / n as f64 } else { 0.0 });
    PipelineResult { images, metrics }
}

/// Detections at a low score threshold for AP, one record per image.
pub fn detection_records(
    det: &Detector,
    index: &DatasetIndex,
    inference: &InferenceConfig,
    score_threshold: f64,
) -> Result<Vec<EvalRecord>> {
    let cfg = InferenceConfig {
        score_threshold,
        ..inference.clone()
    };
    index
        .entries
        .par_iter()
        .map(|e| {
            let img = to_tensor(&index.load_image(e)?);
            Ok(EvalRecord {
                id: e.path.clone(),
                ground_truth: e.pixel_boxes(),
                label: e.label,
                detections: det.detect(&img, &cfg)?,
                predicted: None,
            })
        })
        .collect()
}

/// AP@0.5 and AP@0.75 curves of `det` on `index`.
pub fn evaluate_detector(
    det: &Detector,
    index: &DatasetIndex,
    inference: &InferenceConfig,
    options: &PipelineOptions,
) -> Result<(PrCurve, PrCurve)> {
    let recs = detection_records(det, index, inference, options.ap_score_threshold)?;
    Ok((
        average_precision(&recs, 0.5, ApMethod::AllPoints)?,
        average_precision(&recs, 0.75, ApMethod::AllPoints)?,
    ))
}

fn labels_of(index: &DatasetIndex) -> Result<Vec<usize>> {
    index
        .entries
        .iter()
        .map(|e| {
            e.label
                .ok_or_else(|| Error::Invalid(format!("evaluation needs species labels; {} has none", e.path)))
        })
        .collect()
}

/// Uncropped-image predictions of `classifier` in index order.
pub fn baseline_predictions(index: &DatasetIndex, classifier: &ClassifierModel) -> Result<Vec<usize>> {
    index
        .entries
        .par_iter()
        .map(|e| {
            let img = to_tensor(&index.load_image(e)?);
            Ok(classify_auto(&img, classifier)?.class)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PipelineEvaluation {
    pub run: PipelineResult,
    pub pipeline_accuracy: f64,
    pub baseline_accuracy: f64,
    pub report: MetricsReport,
    pub pr: Option<(PrCurve, PrCurve)>,
}

fn pipeline_predictions(run: &PipelineResult) -> Vec<usize> {
    // Failed images count as wrong through an out-of-range label.
    run.images.iter().map(|r| r.label.unwrap_or(usize::MAX)).collect()
}

/// Pipeline accuracy next to the classify-uncropped baseline, plus detector AP
/// when the set carries boxes.
pub fn evaluate_pipeline(index: &DatasetIndex, stages: &Stages) -> Result<PipelineEvaluation> {
    let labels = labels_of(index)?;
    if labels.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let run = run_pipeline(&inputs_from_index(index), stages);
    let preds = pipeline_predictions(&run);
    let base = if stages.detector.is_none() || !stages.options.use_detector {
        preds.clone()
    } else {
        baseline_predictions(index, stages.classifier)?
    };
    let pipeline_accuracy = accuracy(&preds, &labels)?;
    let baseline_accuracy = accuracy(&base, &labels)?;
    let c = stages.classifier.num_classes();
    let clamp = |v: &[usize]| v.iter().map(|&p| p.min(c)).collect::<Vec<_>>();
    let mut report = MetricsReport::new("pipeline evaluation");
    report.push("images", labels.len() as f64);
    report.push("pipeline_accuracy", pipeline_accuracy);
    report.push("baseline_accuracy", baseline_accuracy);
    report.push("pipeline_macro_f1", macro_f1(&clamp(&preds), &labels)?);
    report.push("baseline_macro_f1", macro_f1(&clamp(&base), &labels)?);
    report.push("fallback_rate", run.metrics.get("fallback_rate").unwrap_or(0.0));
    report.push("errors", run.metrics.get("errors").unwrap_or(0.0));
    let has_boxes = index.entries.iter().any(|e| !e.boxes.is_empty());
    let pr = match stages.detector {
        Some(det) if has_boxes => {
            let (a, b) = evaluate_detector(det, index, stages.inference, stages.options)?;
            report.push("detector_map50", a.ap);
            report.push("detector_map75", b.ap);
            Some((a, b))
        }
        _ => None,
    };
    Ok(PipelineEvaluation {
        run,
        pipeline_accuracy,
        baseline_accuracy,
        report,
        pr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub detector: usize,
    pub classifier: usize,
    pub pipeline_accuracy: f64,
    pub baseline_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub report: MetricsReport,
}

/// Every detector against every classifier; mean and standard deviation of
/// both accuracy rows over the combinations.
pub fn combination_sweep(
    detectors: &[Detector],
    classifiers: &[ClassifierModel],
    index: &DatasetIndex,
    inference: &InferenceConfig,
    options: &PipelineOptions,
) -> Result<SweepResult> {
    if detectors.is_empty() || classifiers.is_empty() {
        return Err(Error::Invalid("a sweep needs at least one detector and one classifier".into()));
    }
    let labels = labels_of(index)?;
    let inputs = inputs_from_index(index);
    let mut cells = Vec::with_capacity(detectors.len() * classifiers.len());
    for (j, clf) in classifiers.iter().enumerate() {
        let baseline_accuracy = accuracy(&baseline_predictions(index, clf)?, &labels)?;
        for (i, det) in detectors.iter().enumerate() {
            let stages = Stages {
                detector: Some(det),
                classifier: clf,
                inference,
                options,
            };
            let run = run_pipeline(&inputs, &stages);
            cells.push(SweepCell {
                detector: i,
                classifier: j,
                pipeline_accuracy: accuracy(&pipeline_predictions(&run), &labels)?,
                baseline_accuracy,
            });
        }
    }
    let pa: Vec<f64> = cells.iter().map(|c| c.pipeline_accuracy).collect();
    let ba: Vec<f64> = cells.iter().map(|c| c.baseline_accuracy).collect();
    let (pm, ps) = mean_std(&pa);
    let (bm, bs) = mean_std(&ba);
    let mut report = MetricsReport::new(format!("{}x{} combinations", detectors.len(), classifiers.len()));
    report.push("combinations", cells.len() as f64);
    report.push("pipeline_accuracy_mean", pm);
    report.push("pipeline_accuracy_std", ps);
    report.push("baseline_accuracy_mean", bm);
    report.push("baseline_accuracy_std", bs);
    Ok(SweepResult { cells, report })
}

/// Train a detector on each class subset and on everything, and cross-evaluate.
pub fn cross_subset_detection(
    train: &DatasetIndex,
    test: &DatasetIndex,
    split: &ClassSplit,
    cfg: &PipelineConfig,
) -> Result<CrossSubsetResult> {
    cross_subset_protocol(
        train,
        test,
        split,
        |_, data| -> Result<Detector> {
            let samples = detection_samples(data)?;
            Ok(train_detector(&samples, &cfg.detector, &cfg.detector_train, None)?.0)
        },
        |det, data| {
            let (a, b) = evaluate_detector(det, data, &cfg.detector.inference, &cfg.pipeline)?;
            Ok((a.ap, b.ap))
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{classify, ClassifierConfig};
    use crate::data::{generate_synthetic, SyntheticSceneSpec};
    use crate::detector::{DetectionHead, DetectorArch, ROW};

    fn small_index(n: usize) -> DatasetIndex {
        let mut spec = SyntheticSceneSpec::with_species(3, 9);
        spec.width = 64;
        spec.height = 64;
        for s in spec.species.iter_mut() {
            s.size = (16, 24);
        }
        generate_synthetic(&spec, n).unwrap()
    }

    fn classifier(classes: &[String]) -> ClassifierModel {
        let cfg = ClassifierConfig {
            with_parts: false,
            ..Default::default()
        };
        ClassifierModel::new(&cfg, classes.to_vec(), 1).unwrap()
    }

    /// Zero head: every prior scores exactly 0.5.
    fn silent_detector() -> Detector {
        let mut det = Detector::new(DetectorArch::desk(), 0).unwrap();
        det.head = DetectionHead::zeroed(
            &det.head.convs.iter().map(|c| c.in_channels).collect::<Vec<_>>(),
            &det.head.convs.iter().map(|c| c.out_channels / ROW).collect::<Vec<_>>(),
        );
        det
    }

    #[test]
    fn zero_detections_fall_back_to_the_full_image() {
        let idx = small_index(2);
        let clf = classifier(&idx.classes);
        let det = silent_detector();
        let opts = PipelineOptions::default();
        let inf = InferenceConfig {
            score_threshold: 0.6,
            ..Default::default()
        };
        let stages = Stages {
            detector: Some(&det),
            classifier: &clf,
            inference: &inf,
            options: &opts,
        };
        let run = run_pipeline(&inputs_from_index(&idx), &stages);
        for (r, e) in run.images.iter().zip(&idx.entries) {
            assert!(r.fallback && r.detections.is_empty());
            let img = to_tensor(e.pixels.as_ref().unwrap());
            assert_eq!(r.label, Some(classify(&img, &clf, None).unwrap().class));
        }
        assert_eq!(run.metrics.get("fallback_rate"), Some(1.0));
    }

    #[test]
    fn final_label_present_iff_detection_or_full_image() {
        let idx = small_index(3);
        let clf = classifier(&idx.classes);
        let det = Detector::new(DetectorArch::desk(), 4).unwrap();
        let opts = PipelineOptions::default();
        let inf = InferenceConfig {
            score_threshold: 0.0,
            max_detections: 3,
            ..Default::default()
        };
        let stages = Stages {
            detector: Some(&det),
            classifier: &clf,
            inference: &inf,
            options: &opts,
        };
        let mut inputs = inputs_from_index(&idx);
        inputs.push(InputImage {
            id: "missing.png".into(),
            source: ImageSource::Path("/nonexistent/missing.png".into()),
        });
        let run = run_pipeline(&inputs, &stages);
        assert_eq!(run.images.len(), 4);
        for r in &run.images {
            assert_eq!(r.label.is_some(), !r.detections.is_empty() || r.full_image.is_some());
        }
        assert!(run.images[3].error.is_some());
        assert_eq!(run.metrics.get("errors"), Some(1.0));
        assert!(run.images[..3].iter().all(|r| r.detections.len() <= 3 && !r.detections.is_empty()));
    }

    #[test]
    fn perfect_detector_matches_ground_truth_crop() {
        let idx = small_index(4);
        let clf = classifier(&idx.classes);
        let opts = PipelineOptions::default();
        for e in &idx.entries {
            let img = to_tensor(e.pixels.as_ref().unwrap());
            let gt = e.boxes[0].bbox;
            let (crop, _) = padded_crop(&img, &gt, opts.crop_padding);
            let direct = classify(&crop, &clf, None).unwrap();
            let dets = vec![DetectionResult {
                bbox: gt,
                score: 1.0,
                species: String::new(),
                prediction: direct.clone(),
            }];
            assert_eq!(reduce(&dets, Reduction::HighestConfidence, clf.num_classes()), direct.class);
        }
    }

    #[test]
    fn padding_is_clipped() {
        let img = Tensor3::zeros(3, 20, 30);
        let b = BoundingBox::new(0.0, 0.0, 30.0, 20.0).unwrap();
        let (crop, origin) = padded_crop(&img, &b, 0.5);
        assert_eq!((crop.width, crop.height, origin), (30, 20, (0, 0)));
        let b = BoundingBox::new(10.0, 5.0, 20.0, 15.0).unwrap();
        let (crop, origin) = padded_crop(&img, &b, 0.1);
        assert_eq!((crop.width, crop.height, origin), (12, 12, (9, 4)));
    }

    #[test]
    fn majority_vote_and_highest_confidence() {
        let pred = |c: usize| Prediction {
            probabilities: crate::classifier::PredictionPair {
                p: vec![0.5; 3],
                q: None,
                combined: vec![0.5; 3],
            },
            class: c,
            parts: Vec::new(),
        };
        let d = |c: usize, s: f64| DetectionResult {
            bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            score: s,
            species: String::new(),
            prediction: pred(c),
        };
        let dets = vec![d(2, 0.9), d(1, 0.8), d(1, 0.7)];
        assert_eq!(reduce(&dets, Reduction::HighestConfidence, 3), 2);
        assert_eq!(reduce(&dets, Reduction::MajorityVote, 3), 1);
        let tie = vec![d(0, 0.6), d(2, 0.9)];
        assert_eq!(reduce(&tie, Reduction::MajorityVote, 3), 2);
    }

    #[test]
    fn disabled_detector_rows_coincide() {
        let idx = small_index(4);
        let clf = classifier(&idx.classes);
        let det = Detector::new(DetectorArch::desk(), 2).unwrap();
        let opts = PipelineOptions {
            use_detector: false,
            ..Default::default()
        };
        let inf = InferenceConfig::default();
        let stages = Stages {
            detector: Some(&det),
            classifier: &clf,
            inference: &inf,
            options: &opts,
        };
        let ev = evaluate_pipeline(&idx, &stages).unwrap();
        assert_eq!(ev.pipeline_accuracy, ev.baseline_accuracy);
        assert_eq!(ev.report.get("pipeline_macro_f1"), ev.report.get("baseline_macro_f1"));
        assert!(ev.run.images.iter().all(|r| !r.fallback && r.full_image.is_some()));
    }

    #[test]
    fn unlabeled_set_is_rejected() {
        let mut idx = small_index(2);
        idx.entries[1].label = None;
        let clf = classifier(&idx.classes);
        let opts = PipelineOptions::default();
        let inf = InferenceConfig::default();
        let stages = Stages {
            detector: None,
            classifier: &clf,
            inference: &inf,
            options: &opts,
        };
        assert!(evaluate_pipeline(&idx, &stages).unwrap_err().is_validation());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let idx = small_index(3);
        let clf = classifier(&idx.classes);
        let det = Detector::new(DetectorArch::desk(), 1).unwrap();
        let opts = PipelineOptions::default();
        let inf = InferenceConfig {
            score_threshold: 0.3,
            ..Default::default()
        };
        let stages = Stages {
            detector: Some(&det),
            classifier: &clf,
            inference: &inf,
            options: &opts,
        };
        let a = evaluate_pipeline(&idx, &stages).unwrap();
        let b = evaluate_pipeline(&idx, &stages).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.run.to_jsonl(), b.run.to_jsonl());
    }

    #[test]
    fn sweep_reports_mean_and_std() {
        let idx = small_index(3);
        let clfs = vec![
            classifier(&idx.classes),
            ClassifierModel::new(
                &ClassifierConfig {
                    with_parts: false,
                    ..Default::default()
                },
                idx.classes.clone(),
                7,
            )
            .unwrap(),
        ];
        let dets = vec![silent_detector()];
        let inf = InferenceConfig {
            score_threshold: 0.6,
            ..Default::default()
        };
        let r = combination_sweep(&dets, &clfs, &idx, &inf, &PipelineOptions::default()).unwrap();
        assert_eq!(r.cells.len(), 2);
        // A silent detector always falls back, so each pipeline cell equals its baseline.
        for c in &r.cells {
            assert_eq!(c.pipeline_accuracy, c.baseline_accuracy);
        }
        let (m, s) = mean_std(&r.cells.iter().map(|c| c.pipeline_accuracy).collect::<Vec<_>>());
        assert_eq!(r.report.get("pipeline_accuracy_mean"), Some(m));
        assert_eq!(r.report.get("pipeline_accuracy_std"), Some(s));
    }
}
