//! Average precision, classification metrics, the cross-subset detection
//! protocol, and report formatting.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DatasetIndex;
use crate::geometry::{BoundingBox, ScoredBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("average precision is undefined without ground-truth boxes")]
    NoGroundTruth,
    #[error("metric needs at least one sample")]
    Empty,
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("image id `{0}` appears more than once")]
    DuplicateId(String),
    #[error("class split: {0}")]
    Split(String),
}

/// Ground truth and predictions for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub ground_truth: Vec<BoundingBox>,
    pub label: Option<usize>,
    pub detections: Vec<ScoredBox>,
    pub predicted: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ApMethod {
    /// Area under the precision envelope over every recall step.
    #[default]
    AllPoints,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `(recall, precision)` after each ranked detection.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
    pub iou_threshold: f64,
    pub method: ApMethod,
    pub num_ground_truth: usize,
    pub num_detections: usize,
}

impl PrCurve {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("rank\trecall\tprecision\n");
        for (i, (r, p)) in self.points.iter().enumerate() {
            let _ = writeln!(s, "{}\t{r:.6}\t{p:.6}", i + 1);
        }
        s
    }
}

/// Pooled detection order: score descending, then image id, then box index.
fn ranked(records: &[EvalRecord]) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = records
        .iter()
        .enumerate()
        .flat_map(|(r, rec)| (0..rec.detections.len()).map(move |d| (r, d)))
        .collect();
    order.sort_by(|&(ra, da), &(rb, db)| {
        let (a, b) = (&records[ra], &records[rb]);
        b.detections[db]
            .score
            .total_cmp(&a.detections[da].score)
            .then_with(|| a.id.cmp(&b.id))
            .then(da.cmp(&db))
    });
    order
}

/// Ranked true/false-positive flags under greedy matching.
pub fn match_detections(records: &[EvalRecord], iou_threshold: f64) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = records.iter().map(|r| vec![false; r.ground_truth.len()]).collect();
    ranked(records)
        .into_iter()
        .map(|(r, d)| {
            let det = &records[r].detections[d].bbox;
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in records[r].ground_truth.iter().enumerate() {
                if used[r][g] {
                    continue;
                }
                let iou = det.overlap(gt);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    used[r][g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Average precision of pooled detections at one IoU threshold.
pub fn average_precision(records: &[EvalRecord], iou_threshold: f64, method: ApMethod) -> Result<PrCurve, MetricsError> {
    let mut ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(MetricsError::DuplicateId(w[0].to_string()));
    }
    let n_gt: usize = records.iter().map(|r| r.ground_truth.len()).sum();
    if n_gt == 0 {
        return Err(MetricsError::NoGroundTruth);
    }
    let tp = match_detections(records, iou_threshold);
    let mut points = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        points.push((hits as f64 / n_gt as f64, hits as f64 / (i + 1) as f64));
    }
    let ap = match method {
        ApMethod::AllPoints => {
            let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let mut area = 0.0;
            let mut prev = 0.0;
            for (i, &(r, _)) in points.iter().enumerate() {
                area += (r - prev) * envelope[i];
                prev = r;
            }
            area
        }
        ApMethod::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    points.iter().filter(|p| p.0 >= t - 1e-12).map(|p| p.1).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    };
    Ok(PrCurve {
        points,
        ap,
        iou_threshold,
        method,
        num_ground_truth: n_gt,
        num_detections: tp.len(),
    })
}

fn check_lengths(predictions: &[usize], labels: &[usize]) -> Result<(), MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, MetricsError> {
    check_lengths(predictions, labels)?;
    let hits = predictions.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Unweighted mean of per-class F1 over classes seen in predictions or labels.
pub fn macro_f1(predictions: &[usize], labels: &[usize]) -> Result<f64, MetricsError> {
    check_lengths(predictions, labels)?;
    let n = predictions.iter().chain(labels).max().map_or(0, |m| m + 1);
    let (mut tp, mut fp, mut fn_) = (vec![0usize; n], vec![0usize; n], vec![0usize; n]);
    for (&p, &l) in predictions.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let scores: Vec<f64> = (0..n)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64)
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Two disjoint class sets that together cover every class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub subset1: Vec<usize>,
    pub subset2: Vec<usize>,
}

impl ClassSplit {
    /// First half of the classes against the second; with 200 classes this
    /// is 1-100 against 101-200 in one-based numbering.
    pub fn halves(num_classes: usize) -> Self {
        let h = num_classes / 2;
        Self {
            subset1: (0..h).collect(),
            subset2: (h..num_classes).collect(),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), MetricsError> {
        let mut seen = vec![0u8; num_classes];
        for &c in self.subset1.iter().chain(&self.subset2) {
            if c >= num_classes {
                return Err(MetricsError::Split(format!("class {c} outside 0..{num_classes}")));
            }
            seen[c] += 1;
        }
        if let Some(c) = seen.iter().position(|&n| n > 1) {
            return Err(MetricsError::Split(format!("class {c} is in both subsets")));
        }
        if let Some(c) = seen.iter().position(|&n| n == 0) {
            return Err(MetricsError::Split(format!("class {c} is in neither subset")));
        }
        if self.subset1.is_empty() || self.subset2.is_empty() {
            return Err(MetricsError::Split("both subsets need at least one class".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subset {
    S1,
    S2,
    Full,
}

impl Subset {
    pub fn name(self) -> &'static str {
        match self {
            Subset::S1 => "subset1",
            Subset::S2 => "subset2",
            Subset::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCell {
    pub train: Subset,
    pub test: Subset,
    pub map50: f64,
    pub map75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSubsetResult {
    pub cells: Vec<CrossCell>,
}

impl CrossSubsetResult {
    pub fn cell(&self, train: Subset, test: Subset) -> Option<&CrossCell> {
        self.cells.iter().find(|c| c.train == train && c.test == test)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("train\ttest\tmap50\tmap75\n");
        for c in &self.cells {
            let _ = writeln!(s, "{}\t{}\t{:.6}\t{:.6}", c.train.name(), c.test.name(), c.map50, c.map75);
        }
        s
    }
}

/// Train a detector per subset (and on everything) and evaluate it on both
/// subsets: cells (S1,S1), (S1,S2), (S2,S1), (S2,S2) and (Full,Full).
///
/// `train_set` and `test_set` are split by image label; `evaluate` returns
/// `(AP@0.5, AP@0.75)`.
pub fn cross_subset_protocol<M, E, T, V>(
    train_set: &DatasetIndex,
    test_set: &DatasetIndex,
    split: &ClassSplit,
    mut train: T,
    mut evaluate: V,
) -> Result<CrossSubsetResult, E>
where
    E: From<MetricsError>,
    T: FnMut(Subset, &DatasetIndex) -> Result<M, E>,
    V: FnMut(&M, &DatasetIndex) -> Result<(f64, f64), E>,
{
    split.validate(train_set.num_classes())?;
    let train1 = train_set.filter_classes(&split.subset1);
    let train2 = train_set.filter_classes(&split.subset2);
    let test1 = test_set.filter_classes(&split.subset1);
    let test2 = test_set.filter_classes(&split.subset2);
    let mut cells = Vec::with_capacity(5);
    for (subset, data) in [(Subset::S1, &train1), (Subset::S2, &train2)] {
        let model = train(subset, data)?;
        for (test, tdata) in [(Subset::S1, &test1), (Subset::S2, &test2)] {
            let (map50, map75) = evaluate(&model, tdata)?;
            cells.push(CrossCell {
                train: subset,
                test,
                map50,
                map75,
            });
        }
    }
    let full = train(Subset::Full, train_set)?;
    let (map50, map75) = evaluate(&full, test_set)?;
    cells.push(CrossCell {
        train: Subset::Full,
        test: Subset::Full,
        map50,
        map75,
    });
    Ok(CrossSubsetResult { cells })
}

/// Named scalar results in a fixed order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub title: String,
    pub rows: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn new(title: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.rows.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.0 == name).map(|r| r.1)
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut s = format!("{}\n", self.title);
        for (name, v) in &self.rows {
            let _ = writeln!(s, "  {name:<width$}  {v:.6}");
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tvalue\n");
        for (name, v) in &self.rows {
            let _ = writeln!(s, "{name}\t{v}");
        }
        s
    }
}

fn cmp_f64(a: &f64, b: &f64) -> Ordering {
    a.total_cmp(b)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Median, used in reports next to the mean.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(cmp_f64);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn record(id: &str, gt: Vec<BoundingBox>, dets: Vec<(BoundingBox, f64)>) -> EvalRecord {
        EvalRecord {
            id: id.into(),
            ground_truth: gt,
            label: None,
            detections: dets.into_iter().map(|(b, s)| ScoredBox::new(b, s)).collect(),
            predicted: None,
        }
    }

    /// Every ranked prefix is re-matched on its own; the envelope is
    /// integrated over the recall levels j / G.
    fn brute_force_ap(records: &[EvalRecord], thr: f64) -> f64 {
        let order = ranked(records);
        let g: usize = records.iter().map(|r| r.ground_truth.len()).sum();
        let mut pr = Vec::new();
        for n in 1..=order.len() {
            let keep: Vec<(usize, usize)> = order[..n].to_vec();
            let mut sub = records.to_vec();
            for (r, rec) in sub.iter_mut().enumerate() {
                rec.detections = records[r]
                    .detections
                    .iter()
                    .enumerate()
                    .filter(|(d, _)| keep.contains(&(r, *d)))
                    .map(|(_, b)| *b)
                    .collect();
            }
            let mut tp = 0;
            for (r, rec) in sub.iter().enumerate() {
                let mut used = vec![false; rec.ground_truth.len()];
                let mut ds: Vec<(usize, &ScoredBox)> = keep
                    .iter()
                    .filter(|k| k.0 == r)
                    .map(|k| (k.1, &records[r].detections[k.1]))
                    .collect();
                ds.sort_by_key(|(d, _)| order.iter().position(|o| *o == (r, *d)).unwrap());
                for (_, d) in ds {
                    let mut best = None;
                    let mut best_iou = -1.0;
                    for (gi, gt) in rec.ground_truth.iter().enumerate() {
                        let iou = d.bbox.overlap(gt);
                        if !used[gi] && iou >= thr && iou > best_iou {
                            best = Some(gi);
                            best_iou = iou;
                        }
                    }
                    if let Some(gi) = best {
                        used[gi] = true;
                        tp += 1;
                    }
                }
            }
            pr.push((tp as f64 / g as f64, tp as f64 / n as f64));
        }
        (1..=g)
            .map(|j| {
                let level = j as f64 / g as f64;
                pr.iter().filter(|p| p.0 >= level - 1e-12).map(|p| p.1).fold(0.0, f64::max)
            })
            .sum::<f64>()
            / g as f64
    }

    fn random_records(seed: u64) -> Vec<EvalRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_img = rng.random_range(1..5);
        (0..n_img)
            .map(|i| {
                let rand_box = |rng: &mut ChaCha8Rng| {
                    let x = rng.random_range(0.0..40.0);
                    let y = rng.random_range(0.0..40.0);
                    bx(x, y, x + rng.random_range(5.0..20.0), y + rng.random_range(5.0..20.0))
                };
                let gt: Vec<BoundingBox> = (0..rng.random_range(0..4)).map(|_| rand_box(&mut rng)).collect();
                let mut dets = Vec::new();
                for g in &gt {
                    if rng.random_bool(0.7) {
                        let j = |rng: &mut ChaCha8Rng| rng.random_range(-3.0..3.0);
                        let b = bx(
                            g.x_min + j(&mut rng),
                            g.y_min + j(&mut rng),
                            g.x_max + j(&mut rng) + 4.0,
                            g.y_max + j(&mut rng) + 4.0,
                        );
                        dets.push((b, (rng.random_range(0..10) as f64) / 10.0));
                    }
                }
                for _ in 0..rng.random_range(0..4) {
                    dets.push((rand_box(&mut rng), (rng.random_range(0..10) as f64) / 10.0));
                }
                record(&format!("img{i}"), gt, dets)
            })
            .collect()
    }

    #[test]
    fn perfect_detection() {
        let r = [record("a", vec![bx(0.0, 0.0, 10.0, 10.0)], vec![(bx(0.0, 0.0, 10.0, 10.0), 0.9)])];
        assert_eq!(average_precision(&r, 0.5, ApMethod::AllPoints).unwrap().ap, 1.0);
    }

    #[test]
    fn false_positive_first_halves_ap() {
        let r = [record(
            "a",
            vec![bx(0.0, 0.0, 10.0, 10.0)],
            vec![(bx(50.0, 50.0, 60.0, 60.0), 0.9), (bx(0.0, 0.0, 10.0, 10.0), 0.4)],
        )];
        let c = average_precision(&r, 0.5, ApMethod::AllPoints).unwrap();
        assert_eq!(c.points, vec![(0.0, 0.0), (1.0, 0.5)]);
        assert!((c.ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eleven_point_variant() {
        let r = [record(
            "a",
            vec![bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 20.0, 30.0, 30.0)],
            vec![(bx(0.0, 0.0, 10.0, 10.0), 0.9), (bx(50.0, 50.0, 60.0, 60.0), 0.5)],
        )];
        // recall 0.5 at precision 1, never higher: six of eleven levels hit
        let c = average_precision(&r, 0.5, ApMethod::ElevenPoint).unwrap();
        assert!((c.ap - 6.0 / 11.0).abs() < 1e-12);
        assert!((average_precision(&r, 0.5, ApMethod::AllPoints).unwrap().ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ap_errors() {
        let r = [record("a", vec![], vec![(bx(0.0, 0.0, 1.0, 1.0), 0.5)])];
        assert_eq!(average_precision(&r, 0.5, ApMethod::AllPoints), Err(MetricsError::NoGroundTruth));
        let d = [record("a", vec![bx(0.0, 0.0, 1.0, 1.0)], vec![]), record("a", vec![], vec![])];
        assert!(matches!(
            average_precision(&d, 0.5, ApMethod::AllPoints),
            Err(MetricsError::DuplicateId(_))
        ));
    }

    #[test]
    fn ap_matches_brute_force() {
        for seed in 0..200 {
            let recs = random_records(seed);
            if recs.iter().all(|r| r.ground_truth.is_empty()) {
                continue;
            }
            for thr in [0.5, 0.75] {
                let ap = average_precision(&recs, thr, ApMethod::AllPoints).unwrap().ap;
                let bf = brute_force_ap(&recs, thr);
                assert!((ap - bf).abs() < 1e-9, "seed {seed} thr {thr}: {ap} vs {bf}");
            }
        }
    }

    #[test]
    fn classification_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 1, 2, 2], &[1, 2, 1, 2]).unwrap(), 0.5);
        assert_eq!(macro_f1(&[1, 1, 2, 2], &[1, 2, 1, 2]).unwrap(), 0.5);
        assert_eq!(accuracy(&[], &[]), Err(MetricsError::Empty));
        assert!(matches!(macro_f1(&[1], &[1, 2]), Err(MetricsError::LengthMismatch { .. })));
    }

    #[test]
    fn paper_class_split() {
        let s = ClassSplit::halves(200);
        assert_eq!(s.subset1, (0..100).collect::<Vec<_>>());
        assert_eq!(s.subset2, (100..200).collect::<Vec<_>>());
        s.validate(200).unwrap();
        let same = ClassSplit {
            subset1: vec![0, 1],
            subset2: vec![0, 1],
        };
        assert!(same.validate(2).is_err());
    }

    #[test]
    fn protocol_layout() {
        let idx = DatasetIndex {
            classes: vec!["a".into(), "b".into()],
            ..Default::default()
        };
        let res = cross_subset_protocol::<Subset, MetricsError, _, _>(
            &idx,
            &idx,
            &ClassSplit::halves(2),
            |s, _| Ok(s),
            |m, _| Ok((if *m == Subset::Full { 1.0 } else { 0.5 }, 0.25)),
        )
        .unwrap();
        let pairs: Vec<(Subset, Subset)> = res.cells.iter().map(|c| (c.train, c.test)).collect();
        use Subset::*;
        assert_eq!(pairs, vec![(S1, S1), (S1, S2), (S2, S1), (S2, S2), (Full, Full)]);
        assert_eq!(res.cell(Full, Full).unwrap().map50, 1.0);
        let bad = ClassSplit {
            subset1: vec![0],
            subset2: vec![0],
        };
        assert!(cross_subset_protocol::<Subset, MetricsError, _, _>(&idx, &idx, &bad, |s, _| Ok(s), |_, _| Ok((0.0, 0.0))).is_err());
    }

    #[test]
    fn report_formats() {
        let mut r = MetricsReport::new("detector");
        r.push("map50", 0.5);
        r.push("map75", 0.25);
        assert_eq!(r.to_tsv(), "metric\tvalue\nmap50\t0.5\nmap75\t0.25\n");
        assert!(r.to_text().contains("map75  0.250000"));
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }

    proptest! {
        #[test]
        fn ap_is_invariant_to_monotone_score_maps(seed in 0u64..5000) {
            let recs = random_records(seed);
            prop_assume!(recs.iter().any(|r| !r.ground_truth.is_empty()));
            let base = average_precision(&recs, 0.5, ApMethod::AllPoints).unwrap().ap;
            let mut t = recs.clone();
            for r in &mut t {
                for d in &mut r.detections {
                    d.score = (3.0 * d.score).exp() / 30.0 + 0.1;
                }
            }
            prop_assert!((average_precision(&t, 0.5, ApMethod::AllPoints).unwrap().ap - base).abs() < 1e-12);
        }

        #[test]
        fn stricter_threshold_never_raises_ap(seed in 0u64..5000) {
            let recs = random_records(seed);
            prop_assume!(recs.iter().any(|r| !r.ground_truth.is_empty()));
            let a50 = average_precision(&recs, 0.5, ApMethod::AllPoints).unwrap();
            let a75 = average_precision(&recs, 0.75, ApMethod::AllPoints).unwrap();
            prop_assert!(a75.ap <= a50.ap + 1e-12);
            prop_assert!((0.0..=1.0).contains(&a50.ap));
            for w in a50.points.windows(2) {
                prop_assert!(w[1].0 >= w[0].0);
            }
        }

        /// A lower-scored copy of a detection that overlaps at most one ground
        /// truth can only be a false positive. (With two overlapping ground
        /// truths the copy may legitimately match the second one.)
        #[test]
        fn duplicate_of_matched_box_never_raises_ap(seed in 0u64..5000) {
            let mut recs = random_records(seed);
            prop_assume!(recs.iter().any(|r| !r.ground_truth.is_empty()));
            let base = average_precision(&recs, 0.5, ApMethod::AllPoints).unwrap().ap;
            let r = recs.iter_mut().find(|r| !r.detections.is_empty());
            prop_assume!(r.is_some());
            let r = r.unwrap();
            let mut d = r.detections[0];
            let overlapping = r.ground_truth.iter().filter(|g| iou(g, &d.bbox).unwrap() >= 0.5).count();
            prop_assume!(overlapping <= 1);
            d.score *= 0.5;
            r.detections.push(d);
            prop_assert!(average_precision(&recs, 0.5, ApMethod::AllPoints).unwrap().ap <= base + 1e-12);
        }

        #[test]
        fn classification_metrics_are_permutation_invariant(v in proptest::collection::vec((0usize..4, 0usize..4), 1..30), rot in 0usize..30) {
            let (p, l): (Vec<usize>, Vec<usize>) = v.iter().copied().unzip();
            let k = rot % p.len();
            let mut p2 = p.clone();
            let mut l2 = l.clone();
            p2.rotate_left(k);
            l2.rotate_left(k);
            let a = accuracy(&p, &l).unwrap();
            let f = macro_f1(&p, &l).unwrap();
            prop_assert!((a - accuracy(&p2, &l2).unwrap()).abs() < 1e-12);
            prop_assert!((f - macro_f1(&p2, &l2).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&f));
        }
    }
}
