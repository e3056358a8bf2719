//! Two-stream species classifier: a global network on the whole crop, a
//! part network with its own weights on mined part regions, and a combined
//! prediction from the geometric mean of both streams.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::augment::augment;
use crate::geometry::BoundingBox;
use crate::imaging::{crop_resize, resize};
use crate::nn::{
    global_average_pool, global_average_pool_backward, log_softmax, softmax, ConvLayerSpec, ConvNet, ConvNetSpec, ConvTrace, Linear,
    RmsProp, ShapeError, Tensor3,
};
use crate::parts::{fit_sparse_selector, mine_parts, FeatureFunction, PartConfig, PartError, SelectorConfig, SparseSelector};
use crate::seed;
use crate::train::{EpochLog, TrainConfig, TrainLog};

pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("classifier configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Part(#[from] PartError),
    #[error("part aggregation needs at least one part image")]
    NoParts,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("class `{0}` has no training images")]
    EmptyClass(String),
    #[error("label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },
}

/// Convolutional network followed by global average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnFeatures {
    pub net: ConvNet,
    pub input_size: usize,
}

/// A forward pass kept for back-propagation.
pub struct FeatureTrace {
    trace: ConvTrace,
    pub features: Vec<f64>,
}

impl CnnFeatures {
    pub fn trace(&self, image: &Tensor3) -> FeatureTrace {
        let trace = self.net.forward(image);
        let features = global_average_pool(trace.last());
        FeatureTrace { trace, features }
    }

    /// Accumulate parameter gradients for `d loss / d features`.
    pub fn backward(&self, t: &FeatureTrace, grad: &[f64], param_grad: &mut [f64]) {
        let last = t.trace.last();
        let g = global_average_pool_backward(grad, last.channels, last.height, last.width);
        let mut grads = vec![None; self.net.convs.len()];
        *grads.last_mut().expect("network has layers") = Some(g);
        self.net.backward(&t.trace, grads, Some(param_grad), false);
    }

    fn fit(&self, image: &Tensor3) -> Tensor3 {
        if (image.height, image.width) == (self.input_size, self.input_size) {
            image.clone()
        } else {
            resize(image, self.input_size, self.input_size)
        }
    }
}

impl FeatureFunction for CnnFeatures {
    fn dim(&self) -> usize {
        self.net.out_channels()
    }

    fn features(&self, image: &Tensor3) -> Vec<f64> {
        self.trace(&self.fit(image)).features
    }

    fn input_gradients(&self, image: &Tensor3, dims: &[usize]) -> Vec<Tensor3> {
        let t = self.trace(&self.fit(image));
        let last = t.trace.last();
        dims.iter()
            .map(|&d| {
                let mut onehot = vec![0.0; last.channels];
                onehot[d] = 1.0;
                let g = global_average_pool_backward(&onehot, last.channels, last.height, last.width);
                let mut grads = vec![None; self.net.convs.len()];
                *grads.last_mut().expect("network has layers") = Some(g);
                self.net.backward(&t.trace, grads, None, true).expect("input gradient requested")
            })
            .collect()
    }

    fn input_size(&self) -> Option<usize> {
        Some(self.input_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub input_size: usize,
    pub backbone: ConvNetSpec,
}

impl ClassifierArch {
    /// 32x32 input, four convolutions, 64-dimensional features.
    pub fn desk() -> Self {
        Self {
            input_size: 32,
            backbone: ConvNetSpec {
                in_channels: 3,
                layers: vec![
                    ConvLayerSpec::new(8, 1),
                    ConvLayerSpec::new(16, 2),
                    ConvLayerSpec::new(32, 2),
                    ConvLayerSpec::new(64, 2),
                ],
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    FinalLayerOnly,
    EntireNetwork,
}

/// Which selected dimensions drive part saliency for an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimsMode {
    /// The dimension set of the global stream's top-1 class.
    PredictedClass,
    UnionOfClasses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub arch: ClassifierArch,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "default_true")]
    pub with_parts: bool,
    #[serde(default = "default_finetune")]
    pub finetune: FinetuneMode,
    #[serde(default)]
    pub parts: PartConfig,
    #[serde(default)]
    pub selector: SelectorConfig,
    #[serde(default = "default_dims_mode")]
    pub dims_mode: DimsMode,
    /// Halvings of the L1 penalty tried when some class selects nothing.
    #[serde(default = "default_retries")]
    pub selector_retries: usize,
}

fn default_smoothing() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_finetune() -> FinetuneMode {
    FinetuneMode::EntireNetwork
}
fn default_dims_mode() -> DimsMode {
    DimsMode::PredictedClass
}
fn default_retries() -> usize {
    6
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            arch: ClassifierArch::desk(),
            label_smoothing: default_smoothing(),
            with_parts: true,
            finetune: default_finetune(),
            parts: PartConfig::default(),
            selector: SelectorConfig::default(),
            dims_mode: default_dims_mode(),
            selector_retries: default_retries(),
        }
    }
}

/// Global and part streams with their linear layers.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub arch: ClassifierArch,
    pub classes: Vec<String>,
    pub global: CnnFeatures,
    pub part: CnnFeatures,
    pub global_fc: Linear,
    pub part_fc: Linear,
    pub selector: Option<SparseSelector>,
    pub parts: PartConfig,
    pub dims_mode: DimsMode,
    pub label_smoothing: f64,
}

impl ClassifierModel {
    pub fn new(cfg: &ClassifierConfig, classes: Vec<String>, seed: u64) -> Result<Self, ClassifierError> {
        if classes.is_empty() {
            return Err(ClassifierError::Config("at least one class is required".into()));
        }
        let a = &cfg.arch;
        let global = ConvNet::new(a.backbone.clone(), seed::derive(seed, &[seed::tag::INIT, 10]))?;
        let part = ConvNet::new(a.backbone.clone(), seed::derive(seed, &[seed::tag::INIT, 11]))?;
        let d = global.out_channels();
        let c = classes.len();
        Ok(Self {
            arch: a.clone(),
            global_fc: Linear::new(d, c, seed::derive(seed, &[seed::tag::INIT, 12])),
            part_fc: Linear::new(d, c, seed::derive(seed, &[seed::tag::INIT, 13])),
            global: CnnFeatures {
                net: global,
                input_size: a.input_size,
            },
            part: CnnFeatures {
                net: part,
                input_size: a.input_size,
            },
            classes,
            selector: None,
            parts: cfg.parts.clone(),
            dims_mode: cfg.dims_mode,
            label_smoothing: cfg.label_smoothing,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.global.dim()
    }

    /// Global-stream probabilities.
    pub fn global_probabilities(&self, image: &Tensor3) -> Vec<f64> {
        softmax(&self.global_fc.forward(&self.global.features(image)))
    }

    /// Part-stream probabilities from part boxes in `image` coordinates.
    pub fn part_probabilities(&self, image: &Tensor3, parts: &[BoundingBox]) -> Result<Vec<f64>, ClassifierError> {
        let crops = part_crops(image, parts, self.arch.input_size);
        let agg = extract_and_aggregate(&crops, &self.part)?;
        Ok(softmax(&self.part_fc.forward(&agg)))
    }

    /// Dimension set for saliency given the global prediction.
    pub fn dims_for(&self, p: &[f64]) -> Option<Vec<usize>> {
        let s = self.selector.as_ref()?;
        Some(match self.dims_mode {
            DimsMode::PredictedClass => s.dims_for(argmax(p)).to_vec(),
            DimsMode::UnionOfClasses => s.union_dims(),
        })
    }

    /// Mine part boxes for `image`; empty without a fitted selector.
    pub fn mine(&self, image: &Tensor3, p: &[f64]) -> Result<Vec<BoundingBox>, ClassifierError> {
        match self.dims_for(p) {
            Some(dims) => Ok(mine_parts(image, &self.global, &dims, &self.parts)?.parts.boxes()),
            None => Ok(Vec::new()),
        }
    }
}

fn part_crops(image: &Tensor3, parts: &[BoundingBox], size: usize) -> Vec<Tensor3> {
    parts.iter().map(|b| crop_resize(image, b, size)).collect()
}

/// Arithmetic mean of per-part feature vectors.
pub fn extract_and_aggregate<F: FeatureFunction + ?Sized>(part_images: &[Tensor3], f: &F) -> Result<Vec<f64>, ClassifierError> {
    if part_images.is_empty() {
        return Err(ClassifierError::NoParts);
    }
    let mut agg = vec![0.0; f.dim()];
    for img in part_images {
        for (a, v) in agg.iter_mut().zip(f.features(img)) {
            *a += v;
        }
    }
    let n = part_images.len() as f64;
    agg.iter_mut().for_each(|a| *a /= n);
    Ok(agg)
}

/// `(1 - eps)` on the true class plus `eps / C` everywhere.
pub fn smooth_labels(class: usize, num_classes: usize, eps: f64) -> Vec<f64> {
    let mut y = vec![eps / num_classes as f64; num_classes];
    y[class] += 1.0 - eps;
    y
}

/// `-sum_i y_i log p_i` with probabilities floored at [`PROBABILITY_FLOOR`].
pub fn cross_entropy(p: &[f64], y: &[f64]) -> f64 {
    p.iter()
        .zip(y)
        .filter(|(_, &yi)| yi > 0.0)
        .map(|(&pi, &yi)| {
            if pi < PROBABILITY_FLOOR {
                log::debug!("probability {pi:e} floored before log");
            }
            -yi * pi.max(PROBABILITY_FLOOR).ln()
        })
        .sum()
}

/// `-sum_i y_i log sqrt(p_i q_i)`, the mean of both streams' cross-entropies.
pub fn joint_loss(p: &[f64], q: &[f64], y: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .zip(y)
        .filter(|(_, &yi)| yi > 0.0)
        .map(|((&pi, &qi), &yi)| -yi * 0.5 * (pi.max(PROBABILITY_FLOOR).ln() + qi.max(PROBABILITY_FLOOR).ln()))
        .sum()
}

/// Renormalized element-wise geometric mean, computed in log space.
pub fn combine(p: &[f64], q: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| 0.5 * (a.max(PROBABILITY_FLOOR).ln() + b.max(PROBABILITY_FLOOR).ln()))
        .collect();
    softmax(&logs)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionPair {
    pub p: Vec<f64>,
    pub q: Option<Vec<f64>>,
    pub combined: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: PredictionPair,
    pub class: usize,
    pub parts: Vec<BoundingBox>,
}

impl Prediction {
    pub fn confidence(&self) -> f64 {
        self.probabilities.combined[self.class]
    }
}

/// Classify with explicit part boxes (or none).
pub fn classify(image: &Tensor3, model: &ClassifierModel, parts: Option<&[BoundingBox]>) -> Result<Prediction, ClassifierError> {
    let p = model.global_probabilities(image);
    let parts = parts.unwrap_or(&[]);
    let (q, combined) = if parts.is_empty() {
        (None, p.clone())
    } else {
        let q = model.part_probabilities(image, parts)?;
        let c = combine(&p, &q);
        (Some(q), c)
    };
    Ok(Prediction {
        class: argmax(&combined),
        probabilities: PredictionPair { p, q, combined },
        parts: parts.to_vec(),
    })
}

/// Classify, mining parts with the model's selector when it has one.
pub fn classify_auto(image: &Tensor3, model: &ClassifierModel) -> Result<Prediction, ClassifierError> {
    let p = model.global_probabilities(image);
    let parts = model.mine(image, &p)?;
    classify(image, model, Some(&parts))
}

/// A cropped single-insect image and its species index.
#[derive(Debug, Clone)]
pub struct ClassificationSample {
    pub image: Tensor3,
    pub label: usize,
}

fn check_dataset(samples: &[ClassificationSample], classes: &[String]) -> Result<(), ClassifierError> {
    if samples.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    let mut counts = vec![0usize; classes.len()];
    for s in samples {
        if s.label >= classes.len() {
            return Err(ClassifierError::Label {
                label: s.label,
                classes: classes.len(),
            });
        }
        counts[s.label] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(ClassifierError::EmptyClass(classes[c].clone()));
    }
    Ok(())
}

/// Fit the selector on global features, halving the penalty while some
/// class ends up with no dimensions.
pub fn fit_selector(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    cfg: &SelectorConfig,
    retries: usize,
) -> Result<SparseSelector, PartError> {
    let mut c = cfg.clone();
    let mut attempt = 0;
    loop {
        match fit_sparse_selector(features, labels, num_classes, &c) {
            Err(PartError::EmptySelection { class, .. }) if attempt < retries => {
                log::info!(
                    "class {class} selected no dimensions at L1 strength {:e}; retrying at half",
                    c.l1_strength
                );
                c.l1_strength /= 2.0;
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// Refit the selector on un-augmented training crops.
pub fn refresh_selector(
    model: &mut ClassifierModel,
    samples: &[ClassificationSample],
    cfg: &ClassifierConfig,
) -> Result<Vec<Vec<f64>>, ClassifierError> {
    let feats: Vec<Vec<f64>> = samples.iter().map(|s| model.global.features(&s.image)).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let sel = fit_selector(&feats, &labels, model.num_classes(), &cfg.selector, cfg.selector_retries)?;
    log::debug!(
        "selector: {} dims per class on average",
        sel.dims.iter().map(Vec::len).sum::<usize>() as f64 / sel.dims.len() as f64
    );
    model.selector = Some(sel);
    Ok(feats)
}

/// Parameter gradients laid out like the model's parameter vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub global: Vec<f64>,
    pub part: Vec<f64>,
    pub global_fc: Vec<f64>,
    pub part_fc: Vec<f64>,
}

impl Grads {
    pub fn zeros(m: &ClassifierModel) -> Self {
        Self {
            global: vec![0.0; m.global.net.params.len()],
            part: vec![0.0; m.part.net.params.len()],
            global_fc: vec![0.0; m.global_fc.params.len()],
            part_fc: vec![0.0; m.part_fc.params.len()],
        }
    }

    fn scale(&mut self, s: f64) {
        for g in [&mut self.global, &mut self.part, &mut self.global_fc, &mut self.part_fc] {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Loss and gradients of one (already augmented) example.
fn example_step(
    model: &ClassifierModel,
    image: &Tensor3,
    parts: &[BoundingBox],
    y: &[f64],
    train_extractors: bool,
    grads: &mut Grads,
) -> f64 {
    let x = model.global.fit(image);
    let gt = model.global.trace(&x);
    let logits_p = model.global_fc.forward(&gt.features);
    let p = softmax(&logits_p);
    if parts.is_empty() {
        let dz: Vec<f64> = p.iter().zip(y).map(|(a, b)| a - b).collect();
        let df = model.global_fc.backward(&gt.features, &dz, &mut grads.global_fc);
        if train_extractors {
            model.global.backward(&gt, &df, &mut grads.global);
        }
        return cross_entropy(&p, y);
    }
    let crops = part_crops(image, parts, model.arch.input_size);
    let traces: Vec<FeatureTrace> = crops.iter().map(|c| model.part.trace(c)).collect();
    let n = traces.len() as f64;
    let mut agg = vec![0.0; model.feature_dim()];
    for t in &traces {
        for (a, v) in agg.iter_mut().zip(&t.features) {
            *a += v / n;
        }
    }
    let q = softmax(&model.part_fc.forward(&agg));
    let dzp: Vec<f64> = p.iter().zip(y).map(|(a, b)| 0.5 * (a - b)).collect();
    let dzq: Vec<f64> = q.iter().zip(y).map(|(a, b)| 0.5 * (a - b)).collect();
    let dfp = model.global_fc.backward(&gt.features, &dzp, &mut grads.global_fc);
    let dfq = model.part_fc.backward(&agg, &dzq, &mut grads.part_fc);
    if train_extractors {
        model.global.backward(&gt, &dfp, &mut grads.global);
        let per: Vec<f64> = dfq.iter().map(|v| v / n).collect();
        for t in &traces {
            model.part.backward(t, &per, &mut grads.part);
        }
    }
    joint_loss(&p, &q, y)
}

/// Loss of one example without touching gradients, for checks.
pub fn example_loss(model: &ClassifierModel, image: &Tensor3, parts: &[BoundingBox], label: usize) -> f64 {
    let y = smooth_labels(label, model.num_classes(), model.label_smoothing);
    let mut g = Grads::zeros(model);
    example_step(model, image, parts, &y, false, &mut g)
}

/// Loss and full parameter gradients of one un-augmented example.
pub fn example_gradients(model: &ClassifierModel, image: &Tensor3, parts: &[BoundingBox], label: usize) -> (f64, Grads) {
    let y = smooth_labels(label, model.num_classes(), model.label_smoothing);
    let mut g = Grads::zeros(model);
    let loss = example_step(model, image, parts, &y, true, &mut g);
    (loss, g)
}

/// Train (or fine-tune) a classifier.
///
/// With parts enabled the selector is refit and parts re-mined once at the
/// start of every epoch with the parameters of that moment; the part boxes
/// then follow each sample through augmentation.
pub fn train_classifier(
    samples: &[ClassificationSample],
    classes: &[String],
    cfg: &ClassifierConfig,
    train: &TrainConfig,
    init: Option<ClassifierModel>,
) -> Result<(ClassifierModel, TrainLog), ClassifierError> {
    check_dataset(samples, classes)?;
    let mut model = match init {
        Some(m) => {
            if m.num_classes() != classes.len() {
                return Err(ClassifierError::Config(format!(
                    "initial model has {} classes, dataset has {}",
                    m.num_classes(),
                    classes.len()
                )));
            }
            m
        }
        None => ClassifierModel::new(cfg, classes.to_vec(), train.seed)?,
    };
    model.label_smoothing = cfg.label_smoothing;
    model.parts = cfg.parts.clone();
    model.dims_mode = cfg.dims_mode;
    let train_extractors = cfg.finetune == FinetuneMode::EntireNetwork;
    let rms = |len| RmsProp::new(len, train.rms_alpha, train.rms_eps, train.weight_decay);
    let mut opt_g = rms(model.global.net.params.len());
    let mut opt_p = rms(model.part.net.params.len());
    let mut opt_gfc = rms(model.global_fc.params.len());
    let mut opt_pfc = rms(model.part_fc.params.len());
    let c = model.num_classes();
    let mut log = TrainLog::default();

    for epoch in 1..=train.epochs {
        let lr = train.schedule.lr_at(epoch);
        let parts: Vec<Vec<BoundingBox>> = if cfg.with_parts {
            let feats = refresh_selector(&mut model, samples, cfg)?;
            let mut out = Vec::with_capacity(samples.len());
            for (s, f) in samples.iter().zip(&feats) {
                let p = softmax(&model.global_fc.forward(f));
                out.push(model.mine(&s.image, &p)?);
            }
            out
        } else {
            vec![Vec::new(); samples.len()]
        };
        let order = crate::train::epoch_order(samples.len(), train.seed, epoch);
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size.max(1)) {
            let mut g = Grads::zeros(&model);
            for &i in batch {
                let s = &samples[i];
                let aug = augment(
                    &s.image,
                    &parts[i],
                    &train.augment,
                    seed::derive(train.seed, &[seed::tag::AUGMENT, epoch as u64, i as u64]),
                );
                let boxes: Vec<BoundingBox> = aug.boxes.into_iter().filter(|b| b.width() >= 1.0 && b.height() >= 1.0).collect();
                let y = smooth_labels(s.label, c, cfg.label_smoothing);
                total += example_step(&model, &aug.image, &boxes, &y, train_extractors, &mut g);
            }
            g.scale(1.0 / batch.len() as f64);
            if train_extractors {
                opt_g.step(&mut model.global.net.params, &g.global, lr);
                opt_p.step(&mut model.part.net.params, &g.part, lr);
            }
            opt_gfc.step(&mut model.global_fc.params, &g.global_fc, lr);
            opt_pfc.step(&mut model.part_fc.params, &g.part_fc, lr);
        }
        let loss = total / samples.len() as f64;
        log::info!("classifier epoch {epoch}/{} lr {lr:e} loss {loss:.5}", train.epochs);
        log.epochs.push(EpochLog { epoch, lr, loss });
    }
    if cfg.with_parts {
        refresh_selector(&mut model, samples, cfg)?;
    } else {
        model.selector = None;
    }
    Ok((model, log))
}

/// Fraction of samples whose automatic prediction matches the label.
pub fn accuracy_on(model: &ClassifierModel, samples: &[ClassificationSample]) -> Result<f64, ClassifierError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for s in samples {
        if classify_auto(&s.image, model)?.class == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Per-class log-probabilities, exposed for callers that need raw scores.
pub fn log_probabilities(model: &ClassifierModel, image: &Tensor3) -> Vec<f64> {
    log_softmax(&model.global_fc.forward(&model.global.features(image)))
}
