//! Single-shot multibox detector: a convolutional backbone exposing several
//! feature maps, a 3x3 convolutional head per map predicting `(C + 4) * K`
//! channels, the multibox objective and inference decoding.
//!
//! Each prior row is laid out `[background, moth, dx, dy, dw, dh]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::augment::augment;
use crate::geometry::{nms, BoundingBox, ScoredBox};
use crate::imaging::resize;
use crate::nn::{log_softmax, softmax, Conv2d, ConvNet, ConvNetSpec, ConvTrace, RmsProp, ShapeError, Tensor3};
use crate::priors::{
    decode_offsets, encode_offsets, generate_priors, match_priors, MatchResult, OffsetTarget, PriorError, PriorGrid, PriorLabel, PriorSpec,
};
use crate::seed;
use crate::train::{EpochLog, TrainConfig, TrainLog};

/// Number of classes scored per prior: background and moth.
pub const NUM_CLASSES: usize = 2;
pub const BACKGROUND: usize = 0;
pub const MOTH: usize = 1;
pub const ROW: usize = NUM_CLASSES + 4;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("detector configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error("training set is empty")]
    EmptyDataset,
}

/// Maps an image of fixed size to an ordered list of feature maps and
/// back-propagates gradients from those maps.
pub trait FeatureExtractor {
    type Trace;

    /// `(channels, height, width)` of the expected input.
    fn input_shape(&self) -> (usize, usize, usize);
    fn map_shapes(&self) -> Vec<(usize, usize, usize)>;
    fn extract(&self, image: &Tensor3) -> (Vec<Tensor3>, Self::Trace);
    /// Accumulates parameter gradients into `param_grad` and returns the
    /// input gradient when `want_input` is set.
    fn backward(&self, trace: &Self::Trace, map_grads: Vec<Tensor3>, param_grad: Option<&mut [f64]>, want_input: bool) -> Option<Tensor3>;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub net: ConvNetSpec,
    /// Layer indices whose outputs feed the detection head, in prior order.
    pub taps: Vec<usize>,
}

/// Small convolutional backbone with tapped intermediate outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBackbone {
    pub spec: BackboneSpec,
    pub net: ConvNet,
    pub input_size: usize,
}

impl ConvBackbone {
    pub fn new(spec: BackboneSpec, input_size: usize, seed: u64) -> Result<Self, DetectorError> {
        let net = ConvNet::new(spec.net.clone(), seed)?;
        Self::from_net(spec, net, input_size)
    }

    pub fn from_net(spec: BackboneSpec, net: ConvNet, input_size: usize) -> Result<Self, DetectorError> {
        if spec.taps.is_empty() || spec.taps.iter().any(|&t| t >= net.convs.len()) {
            return Err(DetectorError::Config("backbone taps must name existing layers".into()));
        }
        if spec.taps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DetectorError::Config("backbone taps must be increasing".into()));
        }
        Ok(Self { spec, net, input_size })
    }
}

impl FeatureExtractor for ConvBackbone {
    type Trace = ConvTrace;

    fn input_shape(&self) -> (usize, usize, usize) {
        (self.net.spec.in_channels, self.input_size, self.input_size)
    }

    fn map_shapes(&self) -> Vec<(usize, usize, usize)> {
        let shapes = self.net.layer_shapes(self.input_size, self.input_size);
        self.spec.taps.iter().map(|&t| shapes[t]).collect()
    }

    fn extract(&self, image: &Tensor3) -> (Vec<Tensor3>, ConvTrace) {
        let trace = self.net.forward(image);
        let maps = self.spec.taps.iter().map(|&t| trace.output(t).clone()).collect();
        (maps, trace)
    }

    fn backward(&self, trace: &ConvTrace, map_grads: Vec<Tensor3>, param_grad: Option<&mut [f64]>, want_input: bool) -> Option<Tensor3> {
        let mut grads: Vec<Option<Tensor3>> = vec![None; self.net.convs.len()];
        for (&t, g) in self.spec.taps.iter().zip(map_grads) {
            grads[t] = Some(g);
        }
        self.net.backward(trace, grads, param_grad, want_input)
    }

    fn params(&self) -> &[f64] {
        &self.net.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.net.params
    }
}

/// One 3x3 convolution per feature map with `(C + 4) * K` output channels.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead {
    pub convs: Vec<Conv2d>,
    pub priors_per_cell: Vec<usize>,
    pub params: Vec<f64>,
}

impl DetectionHead {
    pub fn zeroed(map_channels: &[usize], priors_per_cell: &[usize]) -> Self {
        let mut offset = 0;
        let convs = map_channels
            .iter()
            .zip(priors_per_cell)
            .map(|(&c, &k)| {
                let conv = Conv2d {
                    in_channels: c,
                    out_channels: ROW * k,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    offset,
                };
                offset += conv.param_len();
                conv
            })
            .collect();
        Self {
            convs,
            priors_per_cell: priors_per_cell.to_vec(),
            params: vec![0.0; offset],
        }
    }

    /// Uniform fan-in initialization from `seed`.
    pub fn new(map_channels: &[usize], priors_per_cell: &[usize], seed: u64) -> Self {
        use rand::Rng;
        let mut head = Self::zeroed(map_channels, priors_per_cell);
        let mut rng = seed::rng(seed, &[seed::tag::INIT, 99]);
        for conv in &head.convs {
            let bound = (1.0 / conv.fan_in() as f64).sqrt();
            for v in head.params[conv.offset..conv.offset + conv.weight_len()].iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        head
    }

    pub fn output_channels(&self) -> Vec<usize> {
        self.convs.iter().map(|c| c.out_channels).collect()
    }
}

/// Per-prior class scores (unnormalized log-likelihoods) and offsets in prior order.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    pub rows: Vec<[f64; ROW]>,
}

impl DetectorOutput {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn scores(&self, prior: usize) -> [f64; NUM_CLASSES] {
        [self.rows[prior][0], self.rows[prior][1]]
    }

    pub fn offsets(&self, prior: usize) -> OffsetTarget {
        OffsetTarget::from_slice(&self.rows[prior][NUM_CLASSES..])
    }

    pub fn moth_probability(&self, prior: usize) -> f64 {
        softmax(&self.scores(prior))[MOTH]
    }
}

/// Flatten per-map head outputs into rows ordered `(map, row, col, ratio)`.
pub fn flatten_head(outputs: &[Tensor3], priors_per_cell: &[usize]) -> DetectorOutput {
    let mut rows = Vec::new();
    for (out, &k) in outputs.iter().zip(priors_per_cell) {
        for y in 0..out.height {
            for x in 0..out.width {
                for r in 0..k {
                    let mut row = [0.0; ROW];
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = out.get(r * ROW + j, y, x);
                    }
                    rows.push(row);
                }
            }
        }
    }
    DetectorOutput { rows }
}

fn unflatten_grad(rows: &[[f64; ROW]], shapes: &[(usize, usize, usize)], priors_per_cell: &[usize]) -> Vec<Tensor3> {
    let mut idx = 0;
    shapes
        .iter()
        .zip(priors_per_cell)
        .map(|(&(c, h, w), &k)| {
            let mut t = Tensor3::zeros(c, h, w);
            for y in 0..h {
                for x in 0..w {
                    for r in 0..k {
                        for j in 0..ROW {
                            t.set(r * ROW + j, y, x, rows[idx][j]);
                        }
                        idx += 1;
                    }
                }
            }
            t
        })
        .collect()
}

/// Everything needed to back-propagate one forward pass.
pub struct DetectorPass<T> {
    pub output: DetectorOutput,
    maps: Vec<Tensor3>,
    trace: T,
}

/// Run the backbone and head on an image already at the network input size.
pub fn forward<E: FeatureExtractor>(image: &Tensor3, extractor: &E, head: &DetectionHead) -> Result<DetectorPass<E::Trace>, DetectorError> {
    let expected = extractor.input_shape();
    if image.shape() != expected {
        return Err(ShapeError::Input {
            expected,
            got: image.shape(),
        }
        .into());
    }
    let (maps, trace) = extractor.extract(image);
    if maps.len() != head.convs.len() || maps.iter().zip(&head.convs).any(|(m, c)| m.channels != c.in_channels) {
        return Err(DetectorError::Config(
            "detection head does not match the extractor's feature maps".into(),
        ));
    }
    let outs: Vec<Tensor3> = maps.iter().zip(&head.convs).map(|(m, c)| c.forward(&head.params, m)).collect();
    Ok(DetectorPass {
        output: flatten_head(&outs, &head.priors_per_cell),
        maps,
        trace,
    })
}

/// Back-propagate row gradients through head and extractor.
pub fn backward<E: FeatureExtractor>(
    pass: &DetectorPass<E::Trace>,
    row_grads: &[[f64; ROW]],
    extractor: &E,
    head: &DetectionHead,
    extractor_grad: Option<&mut [f64]>,
    head_grad: &mut [f64],
) {
    let shapes: Vec<(usize, usize, usize)> = pass
        .maps
        .iter()
        .zip(&head.convs)
        .map(|(m, c)| (c.out_channels, m.height, m.width))
        .collect();
    let out_grads = unflatten_grad(row_grads, &shapes, &head.priors_per_cell);
    let want_maps = extractor_grad.is_some();
    let mut map_grads = Vec::with_capacity(out_grads.len());
    for ((conv, map), g) in head.convs.iter().zip(&pass.maps).zip(&out_grads) {
        if let Some(gm) = conv.backward(&head.params, map, g, Some(head_grad), want_maps) {
            map_grads.push(gm);
        }
    }
    if let Some(eg) = extractor_grad {
        extractor.backward(&pass.trace, map_grads, Some(eg), false);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Mined negatives per positive.
    pub neg_pos_ratio: f64,
    /// Smooth-L1 transition point.
    pub smooth_l1_beta: f64,
    pub match_iou: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            neg_pos_ratio: 3.0,
            smooth_l1_beta: 1.0,
            match_iou: 0.5,
        }
    }
}

/// Unnormalized multibox loss terms for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiboxTerms {
    pub conf: f64,
    pub loc: f64,
    pub matched: usize,
    pub negatives: Vec<usize>,
    /// d(conf + loc)/d(row), before division by the matched count.
    pub grads: Vec<[f64; ROW]>,
}

fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

/// Regression targets for every positive prior.
pub fn offset_targets(
    grid: &PriorGrid,
    matches: &MatchResult,
    ground_truth: &[BoundingBox],
    variances: (f64, f64),
) -> Result<Vec<Option<OffsetTarget>>, PriorError> {
    matches
        .assigned
        .iter()
        .enumerate()
        .map(|(p, g)| match g {
            Some(g) => encode_offsets(&ground_truth[*g].to_center_size(), &grid.centers[p], variances).map(Some),
            None => Ok(None),
        })
        .collect()
}

/// Confidence and localization terms with hard-negative mining.
///
/// Negatives are background priors ranked by their confidence loss
/// (ties to the lower prior index); `floor(ratio * matched)` are kept.
pub fn multibox_terms(output: &DetectorOutput, matches: &MatchResult, targets: &[Option<OffsetTarget>], cfg: &LossConfig) -> MultiboxTerms {
    let n = output.len();
    let mut grads = vec![[0.0; ROW]; n];
    let mut conf = 0.0;
    let mut loc = 0.0;
    let k = matches.matched_count;
    let mut bg_losses: Vec<(usize, f64)> = Vec::new();
    for p in 0..n {
        let scores = output.scores(p);
        let lsm = log_softmax(&scores);
        match matches.labels[p] {
            PriorLabel::Moth => {
                conf -= lsm[MOTH];
                let prob = softmax(&scores);
                grads[p][BACKGROUND] += prob[BACKGROUND];
                grads[p][MOTH] += prob[MOTH] - 1.0;
                let t = targets[p].expect("positive prior without target").to_array();
                for m in 0..4 {
                    let (l, d) = smooth_l1(output.rows[p][NUM_CLASSES + m] - t[m], cfg.smooth_l1_beta);
                    loc += l;
                    grads[p][NUM_CLASSES + m] += d;
                }
            }
            PriorLabel::Background => bg_losses.push((p, -lsm[BACKGROUND])),
        }
    }
    let n_neg = ((cfg.neg_pos_ratio * k as f64).floor() as usize).min(bg_losses.len());
    bg_losses.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let negatives: Vec<usize> = bg_losses[..n_neg].iter().map(|(p, _)| *p).collect();
    for &(p, l) in &bg_losses[..n_neg] {
        conf += l;
        let prob = softmax(&output.scores(p));
        grads[p][BACKGROUND] += prob[BACKGROUND] - 1.0;
        grads[p][MOTH] += prob[MOTH];
    }
    MultiboxTerms {
        conf,
        loc,
        matched: k,
        negatives,
        grads,
    }
}

/// `(L_conf + L_loc) / K`, or exactly 0 when no prior matched.
pub fn multibox_loss(output: &DetectorOutput, matches: &MatchResult, targets: &[Option<OffsetTarget>], cfg: &LossConfig) -> f64 {
    let t = multibox_terms(output, matches, targets, cfg);
    if t.matched == 0 {
        0.0
    } else {
        (t.conf + t.loc) / t.matched as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            nms_iou: 0.45,
            max_detections: 100,
        }
    }
}

/// Architecture of a detector: everything a checkpoint must agree on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorArch {
    pub input_size: usize,
    pub backbone: BackboneSpec,
    pub priors: PriorSpec,
}

impl DetectorArch {
    /// A 64x64 input with four tapped maps (8x8, 4x4, 2x2, 1x1).
    pub fn desk() -> Self {
        use crate::nn::ConvLayerSpec as L;
        Self {
            input_size: 64,
            backbone: BackboneSpec {
                net: ConvNetSpec {
                    in_channels: 3,
                    layers: vec![
                        L::new(8, 2),
                        L::new(16, 2),
                        L::new(16, 1),
                        L::new(32, 2),
                        L::new(32, 2),
                        L::new(32, 2),
                        L::new(32, 2),
                    ],
                },
                taps: vec![3, 4, 5, 6],
            },
            priors: PriorSpec {
                feature_map_sizes: vec![(8, 8), (4, 4), (2, 2), (1, 1)],
                scales: vec![0.2, 0.35, 0.55, 0.8],
                aspect_ratios: vec![vec![1.0, 2.0, 0.5]; 4],
                image_size: 64,
                extra_square_prior: true,
                clip: true,
                variances: (0.1, 0.2),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub arch: DetectorArch,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            arch: DetectorArch::desk(),
            loss: LossConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

/// A trained (or freshly initialized) detector.
#[derive(Debug, Clone)]
pub struct Detector<E = ConvBackbone> {
    pub arch: DetectorArch,
    pub extractor: E,
    pub head: DetectionHead,
    pub grid: PriorGrid,
}

impl Detector<ConvBackbone> {
    pub fn new(arch: DetectorArch, seed: u64) -> Result<Self, DetectorError> {
        let extractor = ConvBackbone::new(arch.backbone.clone(), arch.input_size, seed::derive(seed, &[seed::tag::INIT, 0]))?;
        let head = {
            let shapes = extractor.map_shapes();
            let channels: Vec<usize> = shapes.iter().map(|s| s.0).collect();
            let k: Vec<usize> = (0..arch.priors.feature_map_sizes.len())
                .map(|i| arch.priors.priors_per_cell(i))
                .collect();
            DetectionHead::new(&channels, &k, seed::derive(seed, &[seed::tag::INIT, 1]))
        };
        Self::assemble(arch, extractor, head)
    }

    pub fn from_params(arch: DetectorArch, backbone: Vec<f64>, head: Vec<f64>) -> Result<Self, DetectorError> {
        let net = ConvNet::with_params(arch.backbone.net.clone(), backbone)?;
        let extractor = ConvBackbone::from_net(arch.backbone.clone(), net, arch.input_size)?;
        let mut det = Self::new_zeroed(arch, extractor)?;
        if det.head.params.len() != head.len() {
            return Err(ShapeError::Params {
                expected: det.head.params.len(),
                got: head.len(),
            }
            .into());
        }
        det.head.params = head;
        Ok(det)
    }

    fn new_zeroed(arch: DetectorArch, extractor: ConvBackbone) -> Result<Self, DetectorError> {
        let channels: Vec<usize> = extractor.map_shapes().iter().map(|s| s.0).collect();
        let k: Vec<usize> = (0..arch.priors.feature_map_sizes.len())
            .map(|i| arch.priors.priors_per_cell(i))
            .collect();
        let head = DetectionHead::zeroed(&channels, &k);
        Self::assemble(arch, extractor, head)
    }
}

impl<E: FeatureExtractor> Detector<E> {
    pub fn assemble(arch: DetectorArch, extractor: E, head: DetectionHead) -> Result<Self, DetectorError> {
        let grid = generate_priors(&arch.priors)?;
        let shapes = extractor.map_shapes();
        if shapes.len() != arch.priors.feature_map_sizes.len() {
            return Err(DetectorError::Config(format!(
                "extractor exposes {} feature maps but the prior spec lists {}",
                shapes.len(),
                arch.priors.feature_map_sizes.len()
            )));
        }
        for (i, (s, m)) in shapes.iter().zip(&arch.priors.feature_map_sizes).enumerate() {
            if (s.1, s.2) != *m {
                return Err(DetectorError::Config(format!(
                    "feature map {i} is {}x{} but the prior spec expects {}x{}",
                    s.1, s.2, m.0, m.1
                )));
            }
            if head.convs[i].out_channels != ROW * arch.priors.priors_per_cell(i) {
                return Err(DetectorError::Config(format!("head channels for map {i} do not match (C+4)*K")));
            }
        }
        Ok(Self {
            arch,
            extractor,
            head,
            grid,
        })
    }

    /// Resize an arbitrary image to the network input.
    pub fn prepare(&self, image: &Tensor3) -> Tensor3 {
        resize(image, self.arch.input_size, self.arch.input_size)
    }

    pub fn forward(&self, image: &Tensor3) -> Result<DetectorOutput, DetectorError> {
        Ok(forward(&self.prepare(image), &self.extractor, &self.head)?.output)
    }

    /// Detections in pixel coordinates of `image`, sorted by descending score.
    pub fn detect(&self, image: &Tensor3, cfg: &InferenceConfig) -> Result<Vec<ScoredBox>, DetectorError> {
        let out = self.forward(image)?;
        Ok(decode_detections(
            &out,
            &self.grid,
            self.arch.priors.variances,
            cfg,
            image.width as f64,
            image.height as f64,
        ))
    }
}

/// Threshold moth probabilities, decode offsets, clip, and apply NMS.
pub fn decode_detections(
    output: &DetectorOutput,
    grid: &PriorGrid,
    variances: (f64, f64),
    cfg: &InferenceConfig,
    width: f64,
    height: f64,
) -> Vec<ScoredBox> {
    let mut cands = Vec::new();
    for p in 0..output.len() {
        let score = output.moth_probability(p);
        if score < cfg.score_threshold {
            continue;
        }
        let Ok(c) = decode_offsets(&output.offsets(p), &grid.centers[p], variances) else {
            continue;
        };
        let b = c.to_corners().clip_unit().to_pixels(width, height);
        cands.push(ScoredBox::new(b, score));
    }
    nms(&cands, cfg.nms_iou.clamp(f64::MIN_POSITIVE, 1.0), cfg.max_detections).unwrap_or_default()
}

/// One training image with pixel-space ground-truth boxes.
#[derive(Debug, Clone)]
pub struct DetectionSample {
    pub image: Tensor3,
    pub boxes: Vec<BoundingBox>,
}

/// Train (or continue training) a detector with RMSProp and step decay.
pub fn train_detector(
    samples: &[DetectionSample],
    cfg: &DetectorConfig,
    train: &TrainConfig,
    init: Option<Detector>,
) -> Result<(Detector, TrainLog), DetectorError> {
    if samples.is_empty() {
        return Err(DetectorError::EmptyDataset);
    }
    let mut det = match init {
        Some(d) => d,
        None => Detector::new(cfg.arch.clone(), train.seed)?,
    };
    let size = det.arch.input_size;
    let mut opt_backbone = RmsProp::new(det.extractor.params().len(), train.rms_alpha, train.rms_eps, train.weight_decay);
    let mut opt_head = RmsProp::new(det.head.params.len(), train.rms_alpha, train.rms_eps, train.weight_decay);
    let mut log = TrainLog::default();

    for epoch in 1..=train.epochs {
        let lr = train.schedule.lr_at(epoch);
        let order = crate::train::epoch_order(samples.len(), train.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(train.batch_size.max(1)) {
            let mut g_backbone = vec![0.0; det.extractor.params().len()];
            let mut g_head = vec![0.0; det.head.params.len()];
            let mut conf_loc = 0.0;
            let mut matched = 0usize;
            let mut passes = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &samples[i];
                let aug = augment(
                    &s.image,
                    &s.boxes,
                    &train.augment,
                    seed::derive(train.seed, &[seed::tag::AUGMENT, epoch as u64, i as u64]),
                );
                let (w, h) = (aug.image.width as f64, aug.image.height as f64);
                let gt: Vec<BoundingBox> = aug
                    .boxes
                    .iter()
                    .map(|b| b.to_normalized(w, h).clip_unit())
                    .filter(|b| b.area() > 0.0)
                    .collect();
                let input = resize(&aug.image, size, size);
                let pass = forward(&input, &det.extractor, &det.head)?;
                let m = match_priors(&det.grid, &gt, cfg.loss.match_iou);
                let targets = offset_targets(&det.grid, &m, &gt, det.arch.priors.variances)?;
                let terms = multibox_terms(&pass.output, &m, &targets, &cfg.loss);
                conf_loc += terms.conf + terms.loc;
                matched += terms.matched;
                passes.push((pass, terms.grads));
            }
            if matched == 0 {
                continue;
            }
            let norm = 1.0 / matched as f64;
            for (pass, grads) in &passes {
                let scaled: Vec<[f64; ROW]> = grads.iter().map(|r| r.map(|v| v * norm)).collect();
                backward(pass, &scaled, &det.extractor, &det.head, Some(&mut g_backbone), &mut g_head);
            }
            opt_backbone.step(det.extractor.params_mut(), &g_backbone, lr);
            opt_head.step(&mut det.head.params, &g_head, lr);
            epoch_loss += conf_loc * norm;
            batches += 1;
        }
        let loss = if batches > 0 { epoch_loss / batches as f64 } else { 0.0 };
        log::info!("detector epoch {epoch}/{} lr {lr:e} loss {loss:.5}", train.epochs);
        log.epochs.push(EpochLog { epoch, lr, loss });
    }
    Ok((det, log))
}
