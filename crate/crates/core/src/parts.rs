//! Unsupervised part estimation: sparse feature selection, gradient saliency,
//! thresholding, peak-seeded k-means and part boxes.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;
use crate::imaging::{draw_rect, resize, to_rgb};
use crate::nn::Tensor3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartError {
    #[error("sparse selector needs at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("features and labels disagree: {0}")]
    Input(String),
    #[error("feature matrix contains a non-finite value at sample {0}")]
    NonFinite(usize),
    #[error("no weight of class {class} exceeds the threshold {threshold:e}; lower the threshold or weaken the L1 penalty")]
    EmptySelection { class: usize, threshold: f64 },
    #[error("saliency needs at least one feature dimension")]
    EmptyDimensions,
    #[error("feature dimension {index} out of range for a {dim}-dimensional feature")]
    DimensionOutOfRange { index: usize, dim: usize },
    #[error("k must be at least 1")]
    ZeroK,
}

/// A differentiable map from an image to a `D`-dimensional feature vector.
pub trait FeatureFunction {
    fn dim(&self) -> usize;
    fn features(&self, image: &Tensor3) -> Vec<f64>;
    /// `d f^(d) / d image` for each listed dimension, in order.
    fn input_gradients(&self, image: &Tensor3, dims: &[usize]) -> Vec<Tensor3>;
    /// Spatial size the function wants, if it has one.
    fn input_size(&self) -> Option<usize> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorMode {
    OneVsRest,
    Multinomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    /// L1 penalty on the mean logistic loss.
    pub l1_strength: f64,
    /// Selection threshold on standardized weights.
    pub threshold: f64,
    pub mode: SelectorMode,
    /// Stop when the largest optimality violation drops below this.
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            l1_strength: 0.02,
            threshold: 1e-5,
            mode: SelectorMode::OneVsRest,
            tolerance: 1e-6,
            max_sweeps: 20_000,
        }
    }
}

/// L1-penalized linear classifier and the feature dimensions it relies on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSelector {
    /// `weights[class][dim]` on standardized features.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub threshold: f64,
    pub dims: Vec<Vec<usize>>,
    pub converged: bool,
    pub sweeps: usize,
}

impl SparseSelector {
    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn dims_for(&self, class: usize) -> &[usize] {
        &self.dims[class]
    }

    pub fn union_dims(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.dims.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Optimality violation of one penalized coordinate with gradient `g`.
fn kkt(w: f64, g: f64, lambda: f64) -> f64 {
    if w != 0.0 {
        (g + lambda * w.signum()).abs()
    } else {
        (g.abs() - lambda).max(0.0)
    }
}

struct Standardized {
    /// Column-major: `cols[j][i]`.
    cols: Vec<Vec<f64>>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Mean of squares per column (1 for non-constant columns, 0 otherwise).
    sq: Vec<f64>,
}

fn standardize(features: &[Vec<f64>]) -> Standardized {
    let n = features.len() as f64;
    let d = features[0].len();
    let mut cols = vec![vec![0.0; features.len()]; d];
    let mut mean = vec![0.0; d];
    let mut scale = vec![1.0; d];
    let mut sq = vec![0.0; d];
    for j in 0..d {
        let m = features.iter().map(|f| f[j]).sum::<f64>() / n;
        let var = features.iter().map(|f| (f[j] - m).powi(2)).sum::<f64>() / n;
        mean[j] = m;
        if var > 1e-24 {
            let s = var.sqrt();
            scale[j] = s;
            for (i, f) in features.iter().enumerate() {
                cols[j][i] = (f[j] - m) / s;
            }
            sq[j] = cols[j].iter().map(|v| v * v).sum::<f64>() / n;
        }
    }
    Standardized { cols, mean, scale, sq }
}

/// Binary L1 logistic regression by proximal coordinate descent with the
/// quadratic upper bound on the logistic curvature. Returns
/// `(weights, bias, converged, sweeps)`.
fn fit_binary(x: &Standardized, targets: &[f64], cfg: &SelectorConfig) -> (Vec<f64>, f64, bool, usize) {
    let n = targets.len() as f64;
    let d = x.cols.len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut z = vec![0.0; targets.len()];
    let mut resid = vec![0.0; targets.len()];
    let update_resid = |z: &[f64], r: &mut [f64]| {
        for i in 0..r.len() {
            r[i] = sigmoid(z[i]) - targets[i];
        }
    };
    for sweep in 1..=cfg.max_sweeps {
        update_resid(&z, &mut resid);
        let gb = resid.iter().sum::<f64>() / n;
        let step = gb / 0.25;
        b -= step;
        z.iter_mut().for_each(|v| *v -= step);
        for j in 0..d {
            if x.sq[j] == 0.0 {
                continue;
            }
            update_resid(&z, &mut resid);
            let g = x.cols[j].iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / n;
            let h = 0.25 * x.sq[j];
            let nw = soft_threshold(w[j] - g / h, cfg.l1_strength / h);
            let delta = nw - w[j];
            if delta != 0.0 {
                for (zi, a) in z.iter_mut().zip(&x.cols[j]) {
                    *zi += delta * a;
                }
                w[j] = nw;
            }
        }
        update_resid(&z, &mut resid);
        let mut worst = (resid.iter().sum::<f64>() / n).abs();
        for j in 0..d {
            let g = x.cols[j].iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / n;
            worst = worst.max(kkt(w[j], g, cfg.l1_strength));
        }
        if worst < cfg.tolerance {
            return (w, b, true, sweep);
        }
    }
    (w, b, false, cfg.max_sweeps)
}

/// Softmax regression with an L1 penalty on every weight, same scheme with
/// the curvature bound 1/2.
fn fit_multinomial(x: &Standardized, labels: &[usize], classes: usize, cfg: &SelectorConfig) -> (Vec<Vec<f64>>, Vec<f64>, bool, usize) {
    let n = labels.len();
    let nf = n as f64;
    let d = x.cols.len();
    let mut w = vec![vec![0.0; d]; classes];
    let mut b = vec![0.0; classes];
    let mut z = vec![vec![0.0; classes]; n];
    let probs = |z: &[Vec<f64>], c: usize| -> Vec<f64> {
        z.iter()
            .zip(labels)
            .map(|(zi, &y)| crate::nn::softmax(zi)[c] - if y == c { 1.0 } else { 0.0 })
            .collect()
    };
    for sweep in 1..=cfg.max_sweeps {
        for c in 0..classes {
            let r = probs(&z, c);
            let step = (r.iter().sum::<f64>() / nf) / 0.5;
            b[c] -= step;
            z.iter_mut().for_each(|zi| zi[c] -= step);
            for j in 0..d {
                if x.sq[j] == 0.0 {
                    continue;
                }
                let r = probs(&z, c);
                let g = x.cols[j].iter().zip(&r).map(|(a, r)| a * r).sum::<f64>() / nf;
                let h = 0.5 * x.sq[j];
                let nw = soft_threshold(w[c][j] - g / h, cfg.l1_strength / h);
                let delta = nw - w[c][j];
                if delta != 0.0 {
                    for (zi, a) in z.iter_mut().zip(&x.cols[j]) {
                        zi[c] += delta * a;
                    }
                    w[c][j] = nw;
                }
            }
        }
        let mut worst: f64 = 0.0;
        for c in 0..classes {
            let r = probs(&z, c);
            worst = worst.max((r.iter().sum::<f64>() / nf).abs());
            for j in 0..d {
                let g = x.cols[j].iter().zip(&r).map(|(a, r)| a * r).sum::<f64>() / nf;
                worst = worst.max(kkt(w[c][j], g, cfg.l1_strength));
            }
        }
        if worst < cfg.tolerance {
            return (w, b, true, sweep);
        }
    }
    (w, b, false, cfg.max_sweeps)
}

/// Fit the L1-penalized selector and derive each class's dimension set
/// `{d : |w_d| > threshold}`.
pub fn fit_sparse_selector(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    cfg: &SelectorConfig,
) -> Result<SparseSelector, PartError> {
    if num_classes < 2 {
        return Err(PartError::TooFewClasses(num_classes));
    }
    if features.is_empty() || features.len() != labels.len() {
        return Err(PartError::Input(format!(
            "{} feature vectors, {} labels",
            features.len(),
            labels.len()
        )));
    }
    let d = features[0].len();
    for (i, f) in features.iter().enumerate() {
        if f.len() != d {
            return Err(PartError::Input(format!("sample {i} has dimension {} instead of {d}", f.len())));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(PartError::NonFinite(i));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(PartError::Input(format!("label {bad} outside 0..{num_classes}")));
    }
    let x = standardize(features);
    let (weights, bias, converged, sweeps) = match cfg.mode {
        SelectorMode::OneVsRest => {
            let mut ws = Vec::with_capacity(num_classes);
            let mut bs = Vec::with_capacity(num_classes);
            let mut all_conv = true;
            let mut most = 0;
            for c in 0..num_classes {
                let t: Vec<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { 0.0 }).collect();
                let (w, b, conv, s) = fit_binary(&x, &t, cfg);
                ws.push(w);
                bs.push(b);
                all_conv &= conv;
                most = most.max(s);
            }
            (ws, bs, all_conv, most)
        }
        SelectorMode::Multinomial => fit_multinomial(&x, labels, num_classes, cfg),
    };
    if !converged {
        log::warn!(
            "sparse selector stopped after {sweeps} sweeps without reaching tolerance {:e}",
            cfg.tolerance
        );
    }
    let mut dims = Vec::with_capacity(num_classes);
    for (c, w) in weights.iter().enumerate() {
        let sel: Vec<usize> = (0..d).filter(|&j| w[j].abs() > cfg.threshold).collect();
        if sel.is_empty() {
            return Err(PartError::EmptySelection {
                class: c,
                threshold: cfg.threshold,
            });
        }
        dims.push(sel);
    }
    Ok(SparseSelector {
        weights,
        bias,
        mean: x.mean,
        scale: x.scale,
        threshold: cfg.threshold,
        dims,
        converged,
        sweeps,
    })
}

/// Per-pixel saliency over a `height x width` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height, "saliency map size mismatch");
        Self {
            width,
            height,
            values,
            normalized: false,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Mean absolute input gradient over the selected dimensions, with
/// per-channel absolute gradients summed at each pixel.
pub fn saliency<F: FeatureFunction + ?Sized>(image: &Tensor3, f: &F, dims: &[usize]) -> Result<SaliencyMap, PartError> {
    if dims.is_empty() {
        return Err(PartError::EmptyDimensions);
    }
    let mut set = dims.to_vec();
    set.sort_unstable();
    set.dedup();
    if let Some(&bad) = set.iter().find(|&&d| d >= f.dim()) {
        return Err(PartError::DimensionOutOfRange { index: bad, dim: f.dim() });
    }
    let (h, w) = (image.height, image.width);
    let mut values = vec![0.0; h * w];
    for g in f.input_gradients(image, &set) {
        for c in 0..g.channels {
            for (v, gv) in values.iter_mut().zip(g.plane(c)) {
                *v += gv.abs();
            }
        }
    }
    let k = set.len() as f64;
    values.iter_mut().for_each(|v| *v /= k);
    Ok(SaliencyMap::new(w, h, values))
}

/// Scale to `[0, 1]` by the maximum, then zero every value strictly below
/// the mean of the scaled map.
pub fn sparsify(map: &SaliencyMap) -> SaliencyMap {
    let mut out = map.clone();
    out.normalized = true;
    let max = map.max();
    if max <= 0.0 {
        return out;
    }
    out.values.iter_mut().for_each(|v| *v /= max);
    let mean = out.values.iter().sum::<f64>() / out.values.len() as f64;
    out.values.iter_mut().for_each(|v| {
        if *v < mean {
            *v = 0.0
        }
    });
    out
}

/// Up to `k` local maxima `(x, y)`, greedily by descending saliency and
/// pairwise more than `radius` apart in Chebyshev distance.
///
/// Equal values are ordered by `(y, x)` ascending, so a plateau yields one peak.
pub fn find_peaks(map: &SaliencyMap, k: usize, radius: usize) -> Vec<(usize, usize)> {
    let (w, h) = (map.width, map.height);
    // a beats b if it is larger, or equal and earlier in row-major order
    let beats = |ax: usize, ay: usize, bx: usize, by: usize| {
        let (a, b) = (map.get(ax, ay), map.get(bx, by));
        a > b || (a == b && (ay, ax) < (by, bx))
    };
    let mut cands = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if map.get(x, y) <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'n: for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    if (nx, ny) != (x, y) && !beats(x, y, nx, ny) {
                        is_max = false;
                        break 'n;
                    }
                }
            }
            if is_max {
                cands.push((x, y));
            }
        }
    }
    cands.sort_by(|a, b| map.get(b.0, b.1).total_cmp(&map.get(a.0, a.1)).then((a.1, a.0).cmp(&(b.1, b.0))));
    let mut peaks: Vec<(usize, usize)> = Vec::new();
    for (x, y) in cands {
        if peaks.len() >= k {
            break;
        }
        if peaks.iter().all(|&(px, py)| x.abs_diff(px).max(y.abs_diff(py)) > radius) {
            peaks.push((x, y));
        }
    }
    peaks
}

pub fn default_radius(width: usize, height: usize) -> usize {
    width.min(height) / 8
}

/// Result of Lloyd's algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans<const N: usize> {
    pub centers: Vec<[f64; N]>,
    pub assignment: Vec<usize>,
    /// Objective after every assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn weighted_sq_dist<const N: usize>(a: &[f64; N], b: &[f64; N], weights: &[f64; N]) -> f64 {
    (0..N).map(|i| weights[i] * (a[i] - b[i]).powi(2)).sum()
}

fn nearest<const N: usize>(p: &[f64; N], centers: &[[f64; N]], weights: &[f64; N]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = weighted_sq_dist(p, center, weights);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd iterations from the given centers until the assignment repeats or
/// `max_iter` assignment steps have run. An empty cluster keeps its center.
pub fn kmeans<const N: usize>(points: &[[f64; N]], init: Vec<[f64; N]>, weights: &[f64; N], max_iter: usize) -> KMeans<N> {
    let mut centers = init;
    let mut assignment: Vec<usize> = Vec::new();
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter.max(1) {
        iterations += 1;
        let mut obj = 0.0;
        let next: Vec<usize> = points
            .iter()
            .map(|p| {
                let (c, d) = nearest(p, &centers, weights);
                obj += d;
                c
            })
            .collect();
        objective.push(obj);
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
        let mut sums = vec![[0.0; N]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for i in 0..N {
                sums[c][i] += p[i];
            }
        }
        for c in 0..centers.len() {
            if counts[c] > 0 {
                for i in 0..N {
                    centers[c][i] = sums[c][i] / counts[c] as f64;
                }
            }
        }
    }
    KMeans {
        centers,
        assignment,
        objective,
        iterations,
        converged,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Part {
    /// Tight hull of the cluster's pixels, `[min, max + 1)` in pixel units.
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub cluster: usize,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PartSet {
    pub parts: Vec<Part>,
    pub peaks: Vec<(usize, usize)>,
    pub objective: Vec<f64>,
    pub converged: bool,
}

impl PartSet {
    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.parts.iter().map(|p| p.bbox).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartConfig {
    pub k: usize,
    /// Peak suppression radius in saliency-map pixels; `None` means an eighth
    /// of the shorter side.
    pub suppression_radius: Option<usize>,
    /// Weights of `(x, y, saliency, r, g, b)` in the clustering metric.
    pub feature_weights: [f64; 6],
    pub max_iter: usize,
}

impl Default for PartConfig {
    fn default() -> Self {
        Self {
            k: 4,
            suppression_radius: None,
            feature_weights: [1.0; 6],
            max_iter: 100,
        }
    }
}

fn unit(v: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        v as f64 / (n - 1) as f64
    }
}

/// Points `(x, y, M, r, g, b)` of every positive-saliency pixel, all in `[0, 1]`.
pub fn cluster_features(image: &Tensor3, map: &SaliencyMap) -> (Vec<[f64; 6]>, Vec<(usize, usize)>) {
    let (w, h) = (map.width, map.height);
    let mut pts = Vec::new();
    let mut coords = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let m = map.get(x, y);
            if m > 0.0 {
                let c = |ch: usize| {
                    if ch < image.channels {
                        image.get(ch, y, x).clamp(0.0, 1.0)
                    } else {
                        0.0
                    }
                };
                pts.push([unit(x, w), unit(y, h), m, c(0), c(1), c(2)]);
                coords.push((x, y));
            }
        }
    }
    (pts, coords)
}

/// k-means over positive-saliency pixels seeded at `peaks`; one box per
/// non-empty cluster. `image` must have the map's spatial size.
pub fn cluster_parts(image: &Tensor3, map: &SaliencyMap, peaks: &[(usize, usize)], k: usize, cfg: &PartConfig) -> PartSet {
    let (pts, coords) = cluster_features(image, map);
    let seeds: Vec<(usize, usize)> = peaks.iter().copied().filter(|&(x, y)| map.get(x, y) > 0.0).take(k).collect();
    if pts.is_empty() || seeds.is_empty() {
        return PartSet::default();
    }
    let init: Vec<[f64; 6]> = seeds
        .iter()
        .map(|&s| pts[coords.iter().position(|&c| c == s).expect("seed is a positive pixel")])
        .collect();
    let km = kmeans(&pts, init, &cfg.feature_weights, cfg.max_iter);
    // x0, y0, x1, y1, pixel count
    type Hull = (usize, usize, usize, usize, usize);
    let mut hulls: Vec<Option<Hull>> = vec![None; seeds.len()];
    for (&(x, y), &c) in coords.iter().zip(&km.assignment) {
        hulls[c] = Some(match hulls[c] {
            None => (x, y, x, y, 1),
            Some((x0, y0, x1, y1, n)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y), n + 1),
        });
    }
    let parts = hulls
        .iter()
        .enumerate()
        .filter_map(|(c, h)| {
            h.map(|(x0, y0, x1, y1, n)| Part {
                bbox: BoundingBox {
                    x_min: x0 as f64,
                    y_min: y0 as f64,
                    x_max: (x1 + 1) as f64,
                    y_max: (y1 + 1) as f64,
                    normalized: false,
                },
                cluster: c,
                pixels: n,
            })
        })
        .collect::<Vec<_>>();
    if parts.len() < seeds.len() {
        log::debug!("dropped {} empty part clusters", seeds.len() - parts.len());
    }
    PartSet {
        parts,
        peaks: seeds,
        objective: km.objective,
        converged: km.converged,
    }
}

/// Intermediate maps kept for inspection.
#[derive(Debug, Clone)]
pub struct PartMining {
    pub raw: SaliencyMap,
    pub sparse: SaliencyMap,
    /// Parts in pixel coordinates of the original image.
    pub parts: PartSet,
}

/// Full part estimation for one image: saliency on the image resized to the
/// feature function's input size, then boxes scaled back to `image`.
pub fn mine_parts<F: FeatureFunction + ?Sized>(image: &Tensor3, f: &F, dims: &[usize], cfg: &PartConfig) -> Result<PartMining, PartError> {
    if cfg.k == 0 {
        return Err(PartError::ZeroK);
    }
    let resized = match f.input_size() {
        Some(s) if (image.height, image.width) != (s, s) => resize(image, s, s),
        _ => image.clone(),
    };
    let raw = saliency(&resized, f, dims)?;
    let sparse = sparsify(&raw);
    let radius = cfg
        .suppression_radius
        .unwrap_or_else(|| default_radius(sparse.width, sparse.height));
    let peaks = find_peaks(&sparse, cfg.k, radius);
    let mut parts = cluster_parts(&resized, &sparse, &peaks, cfg.k, cfg);
    let sx = image.width as f64 / resized.width as f64;
    let sy = image.height as f64 / resized.height as f64;
    for p in &mut parts.parts {
        p.bbox = p.bbox.scale(sx, sy).clip(image.width as f64, image.height as f64);
    }
    Ok(PartMining { raw, sparse, parts })
}

/// Saliency as a black-to-yellow heatmap.
pub fn heatmap_image(map: &SaliencyMap) -> RgbImage {
    let max = map.max();
    RgbImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        let v = if max > 0.0 { map.get(x as usize, y as usize) / max } else { 0.0 };
        let r = (v * 2.0).min(1.0);
        let g = (v * 2.0 - 1.0).clamp(0.0, 1.0);
        image::Rgb([(r * 255.0).round() as u8, (g * 255.0).round() as u8, 0])
    })
}

const PART_COLORS: [[u8; 3]; 6] = [[255, 0, 0], [0, 200, 0], [0, 80, 255], [255, 200, 0], [255, 0, 255], [0, 220, 220]];

/// The image with every part box outlined.
pub fn overlay_parts(image: &Tensor3, parts: &PartSet) -> RgbImage {
    let mut img = to_rgb(image);
    for (i, p) in parts.parts.iter().enumerate() {
        draw_rect(&mut img, &p.bbox, PART_COLORS[i % PART_COLORS.len()]);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `f^(d)(I) = sum w_d * I`, plus optional smooth nonlinearity.
    struct LinearFeatures {
        weights: Vec<Tensor3>,
        squared: bool,
    }

    impl FeatureFunction for LinearFeatures {
        fn dim(&self) -> usize {
            self.weights.len()
        }
        fn features(&self, image: &Tensor3) -> Vec<f64> {
            self.weights
                .iter()
                .map(|w| {
                    let s: f64 = w.data.iter().zip(&image.data).map(|(a, b)| a * b).sum();
                    if self.squared {
                        s * s + s.sin()
                    } else {
                        s
                    }
                })
                .collect()
        }
        fn input_gradients(&self, image: &Tensor3, dims: &[usize]) -> Vec<Tensor3> {
            dims.iter()
                .map(|&d| {
                    let w = &self.weights[d];
                    let s: f64 = w.data.iter().zip(&image.data).map(|(a, b)| a * b).sum();
                    let factor = if self.squared { 2.0 * s + s.cos() } else { 1.0 };
                    Tensor3::from_vec(w.channels, w.height, w.width, w.data.iter().map(|v| v * factor).collect())
                })
                .collect()
        }
    }

    fn rand_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor3 {
        Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn linear(dims: usize, c: usize, size: usize, seed: u64, squared: bool) -> LinearFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearFeatures {
            weights: (0..dims).map(|_| rand_tensor(c, size, size, &mut rng)).collect(),
            squared,
        }
    }

    fn separable_on_dim3(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let mut x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            x[3] = if y == 1 { 2.0 } else { -2.0 } + rng.random_range(-0.5..0.5);
            xs.push(x);
            ys.push(y);
        }
        (xs, ys)
    }

    #[test]
    fn selector_finds_the_informative_dimension() {
        let (xs, ys) = separable_on_dim3(200, 1);
        let cfg = SelectorConfig {
            l1_strength: 0.2,
            ..Default::default()
        };
        let s = fit_sparse_selector(&xs, &ys, 2, &cfg).unwrap();
        assert!(s.converged);
        assert_eq!(s.dims, vec![vec![3], vec![3]]);
        let m = fit_sparse_selector(
            &xs,
            &ys,
            2,
            &SelectorConfig {
                mode: SelectorMode::Multinomial,
                ..cfg
            },
        )
        .unwrap();
        assert!(m.converged);
        assert_eq!(m.dims, vec![vec![3], vec![3]]);
    }

    #[test]
    fn selector_threshold_zero_keeps_all_nonzero_weights() {
        let (xs, ys) = separable_on_dim3(100, 2);
        let cfg = SelectorConfig {
            l1_strength: 0.005,
            threshold: 0.0,
            ..Default::default()
        };
        let s = fit_sparse_selector(&xs, &ys, 2, &cfg).unwrap();
        for (w, d) in s.weights.iter().zip(&s.dims) {
            let nz: Vec<usize> = (0..10).filter(|&j| w[j] != 0.0).collect();
            assert_eq!(&nz, d);
        }
    }

    #[test]
    fn stronger_penalty_never_selects_more() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..150 {
            let y = i % 3;
            let mut x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            x[y] += 1.0;
            x[5] += 0.3 * y as f64;
            xs.push(x);
            ys.push(y);
        }
        let mut last = usize::MAX;
        for lambda in [0.002, 0.01, 0.03, 0.06, 0.1, 0.15] {
            let cfg = SelectorConfig {
                l1_strength: lambda,
                ..Default::default()
            };
            let s = fit_sparse_selector(&xs, &ys, 3, &cfg).unwrap();
            let total: usize = s.dims.iter().map(Vec::len).sum();
            assert!(total <= last, "lambda {lambda}: {total} > {last}");
            last = total;
        }
    }

    #[test]
    fn selector_errors() {
        let (xs, ys) = separable_on_dim3(20, 3);
        assert_eq!(
            fit_sparse_selector(&xs, &ys, 1, &SelectorConfig::default()),
            Err(PartError::TooFewClasses(1))
        );
        let huge = SelectorConfig {
            l1_strength: 10.0,
            ..Default::default()
        };
        assert!(matches!(
            fit_sparse_selector(&xs, &ys, 2, &huge),
            Err(PartError::EmptySelection { .. })
        ));
        let mut bad = xs.clone();
        bad[4][1] = f64::NAN;
        assert_eq!(
            fit_sparse_selector(&bad, &ys, 2, &SelectorConfig::default()),
            Err(PartError::NonFinite(4))
        );
    }

    #[test]
    fn constant_function_has_zero_saliency() {
        let f = LinearFeatures {
            weights: vec![Tensor3::zeros(3, 4, 4)],
            squared: false,
        };
        let m = saliency(&Tensor3::zeros(3, 4, 4), &f, &[0]).unwrap();
        assert!(m.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_function_saliency_is_abs_weight() {
        let f = linear(3, 1, 5, 4, false);
        let m = saliency(&Tensor3::zeros(1, 5, 5), &f, &[1]).unwrap();
        for (v, w) in m.values.iter().zip(&f.weights[1].data) {
            assert_eq!(*v, w.abs());
        }
    }

    #[test]
    fn saliency_matches_finite_differences() {
        let f = linear(4, 3, 8, 5, true);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = Tensor3::from_vec(3, 8, 8, (0..192).map(|_| rng.random_range(0.0..0.1)).collect());
        let dims = [0, 2, 3];
        let m = saliency(&img, &f, &dims).unwrap();
        let h = 1e-5;
        for y in 0..8 {
            for x in 0..8 {
                let mut total = 0.0;
                for &d in &dims {
                    for c in 0..3 {
                        let mut p = img.clone();
                        let i = p.index(c, y, x);
                        p.data[i] += h;
                        let mut q = img.clone();
                        q.data[i] -= h;
                        total += ((f.features(&p)[d] - f.features(&q)[d]) / (2.0 * h)).abs();
                    }
                }
                let fd = total / dims.len() as f64;
                let v = m.get(x, y);
                assert!((v - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "({x},{y}): {v} vs {fd}");
            }
        }
    }

    #[test]
    fn saliency_errors() {
        let f = linear(2, 1, 3, 1, false);
        let img = Tensor3::zeros(1, 3, 3);
        assert_eq!(saliency(&img, &f, &[]), Err(PartError::EmptyDimensions));
        assert_eq!(saliency(&img, &f, &[2]), Err(PartError::DimensionOutOfRange { index: 2, dim: 2 }));
    }

    #[test]
    fn sparsify_examples() {
        let zero = SaliencyMap::new(2, 2, vec![0.0; 4]);
        assert_eq!(sparsify(&zero).values, vec![0.0; 4]);
        let flat = SaliencyMap::new(2, 2, vec![0.3; 4]);
        assert_eq!(sparsify(&flat).values, vec![1.0; 4]);
        let m = SaliencyMap::new(4, 1, vec![0.1, 0.2, 0.9, 1.0]);
        assert_eq!(sparsify(&m).values, vec![0.0, 0.0, 0.9, 1.0]);
    }

    #[test]
    fn single_pixel_peak() {
        let mut v = vec![0.0; 25];
        v[3 * 5 + 1] = 0.7;
        let m = SaliencyMap::new(5, 5, v);
        assert_eq!(find_peaks(&m, 3, 1), vec![(1, 3)]);
        assert!(find_peaks(&SaliencyMap::new(3, 3, vec![0.0; 9]), 2, 1).is_empty());
    }

    fn bumps(w: usize, h: usize, centers: &[(f64, f64, f64)], sigma: f64) -> SaliencyMap {
        let mut v = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                for &(cx, cy, a) in centers {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    v[y * w + x] += a * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        SaliencyMap::new(w, h, v)
    }

    #[test]
    fn two_bumps_two_peaks() {
        let m = sparsify(&bumps(32, 32, &[(8.0, 10.0, 1.0), (24.0, 20.0, 0.8)], 2.5));
        assert_eq!(find_peaks(&m, 2, 4), vec![(8, 10), (24, 20)]);
        assert_eq!(find_peaks(&m, 5, 4).len(), 2);
    }

    #[test]
    fn plateau_gives_a_single_peak() {
        let mut v = vec![0.0; 36];
        for y in 1..4 {
            for x in 2..5 {
                v[y * 6 + x] = 1.0;
            }
        }
        let m = SaliencyMap::new(6, 6, v);
        assert_eq!(find_peaks(&m, 4, 0), vec![(2, 1)]);
    }

    fn blob_map(w: usize, h: usize, rects: &[(usize, usize, usize, usize)]) -> SaliencyMap {
        let mut v = vec![0.0; w * h];
        for &(x0, y0, x1, y1) in rects {
            for y in y0..y1 {
                for x in x0..x1 {
                    let cx = (x0 + x1 - 1) as f64 / 2.0;
                    let cy = (y0 + y1 - 1) as f64 / 2.0;
                    v[y * w + x] = 1.0 / (1.0 + (x as f64 - cx).abs() + (y as f64 - cy).abs());
                }
            }
        }
        SaliencyMap::new(w, h, v)
    }

    #[test]
    fn one_blob_one_part() {
        let m = blob_map(20, 20, &[(3, 5, 9, 12)]);
        let img = Tensor3::zeros(3, 20, 20);
        let peaks = find_peaks(&m, 1, 2);
        let ps = cluster_parts(&img, &m, &peaks, 1, &PartConfig::default());
        assert_eq!(ps.len(), 1);
        assert_eq!(ps.parts[0].bbox, BoundingBox::new(3.0, 5.0, 9.0, 12.0).unwrap());
    }

    #[test]
    fn two_blobs_two_parts() {
        let m = blob_map(32, 32, &[(2, 2, 9, 9), (20, 18, 29, 27)]);
        let img = Tensor3::zeros(3, 32, 32);
        let peaks = find_peaks(&m, 2, 4);
        assert_eq!(peaks.len(), 2);
        let ps = cluster_parts(&img, &m, &peaks, 2, &PartConfig::default());
        let mut boxes = ps.boxes();
        boxes.sort_by(|a, b| a.x_min.total_cmp(&b.x_min));
        assert_eq!(boxes[0], BoundingBox::new(2.0, 2.0, 9.0, 9.0).unwrap());
        assert_eq!(boxes[1], BoundingBox::new(20.0, 18.0, 29.0, 27.0).unwrap());
        assert!(ps.converged);
    }

    #[test]
    fn no_positive_pixels_no_parts() {
        let m = SaliencyMap::new(4, 4, vec![0.0; 16]);
        assert!(cluster_parts(&Tensor3::zeros(3, 4, 4), &m, &[(1, 1)], 1, &PartConfig::default()).is_empty());
    }

    #[test]
    fn converged_assignment_is_nearest_center_exhaustively() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = Tensor3::from_vec(3, 24, 24, (0..3 * 576).map(|_| rng.random_range(0.0..1.0)).collect());
        let m = sparsify(&SaliencyMap::new(24, 24, (0..576).map(|_| rng.random_range(0.0..1.0)).collect()));
        let (pts, coords) = cluster_features(&img, &m);
        let peaks = find_peaks(&m, 4, 3);
        let init = peaks.iter().map(|p| pts[coords.iter().position(|c| c == p).unwrap()]).collect();
        let w = [1.0; 6];
        let km = kmeans(&pts, init, &w, 100);
        assert!(km.converged);
        for (p, &a) in pts.iter().zip(&km.assignment) {
            let da = weighted_sq_dist(p, &km.centers[a], &w);
            for c in &km.centers {
                assert!(da <= weighted_sq_dist(p, c, &w));
            }
        }
    }

    #[test]
    fn mined_parts_are_scaled_back() {
        struct Center;
        impl FeatureFunction for Center {
            fn dim(&self) -> usize {
                1
            }
            fn features(&self, i: &Tensor3) -> Vec<f64> {
                vec![i.data.iter().sum()]
            }
            fn input_gradients(&self, i: &Tensor3, dims: &[usize]) -> Vec<Tensor3> {
                let mut g = Tensor3::zeros(i.channels, i.height, i.width);
                for y in 4..8 {
                    for x in 2..6 {
                        g.set(0, y, x, 1.0);
                    }
                }
                vec![g; dims.len()]
            }
            fn input_size(&self) -> Option<usize> {
                Some(16)
            }
        }
        let img = Tensor3::zeros(3, 64, 32);
        let r = mine_parts(&img, &Center, &[0], &PartConfig::default()).unwrap();
        assert_eq!(r.parts.len(), 1);
        assert_eq!(r.parts.parts[0].bbox, BoundingBox::new(4.0, 16.0, 12.0, 32.0).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn saliency_is_linear_in_dimension_sets(seed in 0u64..1000, split in 1usize..5) {
            let f = linear(6, 2, 5, seed, true);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let img = rand_tensor(2, 5, 5, &mut rng);
            let a: Vec<usize> = (0..split).collect();
            let b: Vec<usize> = (split..6).collect();
            let all = saliency(&img, &f, &(0..6).collect::<Vec<_>>()).unwrap();
            let sa = saliency(&img, &f, &a).unwrap();
            let sb = saliency(&img, &f, &b).unwrap();
            for i in 0..25 {
                let mix = (a.len() as f64 * sa.values[i] + b.len() as f64 * sb.values[i]) / 6.0;
                prop_assert!((all.values[i] - mix).abs() < 1e-9);
            }
        }

        #[test]
        fn sparsify_is_idempotent(v in proptest::collection::vec(0.0f64..1.0, 16)) {
            let once = sparsify(&SaliencyMap::new(4, 4, v));
            let twice = sparsify(&once);
            prop_assert_eq!(&once.values, &twice.values);
            let mean = once.values.iter().sum::<f64>() / 16.0;
            let _ = mean;
        }

        #[test]
        fn thresholded_values_are_zero_or_above_mean(v in proptest::collection::vec(0.0f64..5.0, 1..40)) {
            let n = v.len();
            let m = SaliencyMap::new(n, 1, v);
            let max = m.max();
            let s = sparsify(&m);
            if max > 0.0 {
                let mean = m.values.iter().map(|x| x / max).sum::<f64>() / n as f64;
                prop_assert!(s.values.iter().all(|&x| x == 0.0 || x >= mean));
                prop_assert!(s.values.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }

        #[test]
        fn peaks_bounded_and_separated(v in proptest::collection::vec(0.0f64..1.0, 64), k in 1usize..8, r in 0usize..4) {
            let m = sparsify(&SaliencyMap::new(8, 8, v));
            let p = find_peaks(&m, k, r);
            prop_assert!(p.len() <= k);
            for (i, a) in p.iter().enumerate() {
                prop_assert!(m.get(a.0, a.1) > 0.0);
                for b in &p[i + 1..] {
                    prop_assert!(a.0.abs_diff(b.0).max(a.1.abs_diff(b.1)) > r);
                }
            }
        }

        #[test]
        fn kmeans_objective_non_increasing_and_boxes_valid(seed in 0u64..500, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor3::from_vec(3, 16, 16, (0..768).map(|_| rng.random_range(0.0..1.0)).collect());
            let m = sparsify(&SaliencyMap::new(16, 16, (0..256).map(|_| rng.random_range(0.0..1.0)).collect()));
            let peaks = find_peaks(&m, k, 2);
            let ps = cluster_parts(&img, &m, &peaks, k, &PartConfig::default());
            for w in ps.objective.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            prop_assert!(ps.len() <= peaks.len());
            for p in &ps.parts {
                let b = p.bbox;
                prop_assert!(b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= 16.0 && b.y_max <= 16.0);
                let mut any = false;
                for y in b.y_min as usize..b.y_max as usize {
                    for x in b.x_min as usize..b.x_max as usize {
                        any |= m.get(x, y) > 0.0;
                    }
                }
                prop_assert!(any);
            }
        }
    }
}
