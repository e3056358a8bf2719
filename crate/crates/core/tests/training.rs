use mothwatch::classifier::{accuracy_on, train_classifier, ClassifierConfig};
use mothwatch::config::{desk_schedule, PipelineConfig};
use mothwatch::data::augment::AugmentConfig;
use mothwatch::data::{generate_synthetic, SyntheticSceneSpec};
use mothwatch::detector::{train_detector, DetectionSample, DetectorConfig};
use mothwatch::geometry::{iou, BoundingBox};
use mothwatch::metrics::{ClassSplit, Subset};
use mothwatch::nn::Tensor3;
use mothwatch::pipeline::{classification_samples, cross_subset_detection};
use mothwatch::train::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The same dark blob on white at a random position; the box is the blob's exact extent.
fn blob_scene(rng: &mut ChaCha8Rng) -> DetectionSample {
    let size = 64;
    let (w, h) = (22, 18);
    let x0 = rng.random_range(2..size - w - 2);
    let y0 = rng.random_range(2..size - h - 2);
    let mut img = Tensor3::zeros(3, size, size);
    img.data.iter_mut().for_each(|v| *v = 1.0);
    for c in 0..3 {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                img.set(c, y, x, 0.1);
            }
        }
    }
    DetectionSample {
        image: img,
        boxes: vec![BoundingBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64).unwrap()],
    }
}

#[test]
fn detector_overfits_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let train: Vec<DetectionSample> = (0..20).map(|_| blob_scene(&mut rng)).collect();
    let held_out: Vec<DetectionSample> = (0..10).map(|_| blob_scene(&mut rng)).collect();
    let cfg = DetectorConfig::default();
    let schedule = TrainConfig {
        augment: AugmentConfig::identity(),
        ..desk_schedule(60, 3e-3)
    };
    let (det, log) = train_detector(&train, &cfg, &schedule, None).unwrap();
    assert!(log.final_loss().unwrap() < log.epochs[0].loss);
    for (i, s) in held_out.iter().enumerate() {
        let dets = det.detect(&s.image, &cfg.inference).unwrap();
        let best = dets.first().map_or(0.0, |d| iou(&d.bbox, &s.boxes[0]).unwrap());
        assert!(
            best > 0.8,
            "held-out blob {i}: top detection IoU {best:.3} ({} detections)",
            dets.len()
        );
    }
}

#[test]
fn classifier_separates_synthetic_species() {
    let spec = SyntheticSceneSpec::with_species(5, 31);
    let train = generate_synthetic(&spec, 150).unwrap();
    let test = generate_synthetic(&SyntheticSceneSpec { seed: 32, ..spec }, 100).unwrap();
    let cfg = ClassifierConfig {
        with_parts: false,
        ..ClassifierConfig::default()
    };
    let (model, _) = train_classifier(
        &classification_samples(&train, 0.1).unwrap(),
        &train.classes,
        &cfg,
        &desk_schedule(120, 3e-3),
        None,
    )
    .unwrap();
    let acc = accuracy_on(&model, &classification_samples(&test, 0.1).unwrap()).unwrap();
    assert!(acc >= 0.95, "held-out accuracy {acc:.3}");
}

#[test]
fn cross_subset_detection_stays_comparable() {
    let mut cfg = PipelineConfig::default().with_seed(41);
    cfg.data.synthetic = SyntheticSceneSpec::with_species(2, 41);
    let train = generate_synthetic(&cfg.data.synthetic, 300).unwrap();
    let test = generate_synthetic(&cfg.data.test_synthetic(), 150).unwrap();
    let table = cross_subset_detection(&train, &test, &ClassSplit::halves(2), &cfg).unwrap();
    let map = |a: Subset, b: Subset| table.cell(a, b).unwrap().map50;
    for (train_on, test_on) in [(Subset::S1, Subset::S2), (Subset::S2, Subset::S1)] {
        let cross = map(train_on, test_on);
        let same = map(test_on, test_on);
        assert!(
            (cross - same).abs() <= 0.05,
            "{train_on:?} -> {test_on:?}: cross {cross:.3} vs same {same:.3}\n{}",
            table.to_tsv()
        );
    }
    assert!(table.cell(Subset::Full, Subset::Full).is_some());
}
