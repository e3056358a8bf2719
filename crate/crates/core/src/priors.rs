//! Prior (anchor) boxes: generation per feature map, ground-truth matching, and
//! the center/log-size offset encoding regressed by the detector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoundingBox, CenterSize};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("invalid prior spec: {0}")]
    Spec(String),
    #[error("ground-truth box has zero width or height")]
    EmptyGroundTruth,
    #[error("prior box must have positive width and height")]
    EmptyPrior,
    #[error("offsets must be finite")]
    NonFiniteOffsets,
}

/// Layout of the prior boxes over every detection feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    /// `(rows, cols)` of each feature map, coarsest last.
    pub feature_map_sizes: Vec<(usize, usize)>,
    /// One scale per map, strictly increasing, each in `(0, 1]`.
    pub scales: Vec<f64>,
    /// Aspect ratios (width / height) used at every cell of each map.
    pub aspect_ratios: Vec<Vec<f64>>,
    /// Network input side length in pixels.
    pub image_size: usize,
    /// Add a square prior of scale `sqrt(s_k * s_{k+1})` to each cell.
    #[serde(default)]
    pub extra_square_prior: bool,
    #[serde(default = "default_true")]
    pub clip: bool,
    /// Center and size variances `(v_c, v_s)` of the offset encoding.
    #[serde(default = "default_variances")]
    pub variances: (f64, f64),
}

fn default_true() -> bool {
    true
}

fn default_variances() -> (f64, f64) {
    (0.1, 0.2)
}

impl PriorSpec {
    /// A single-map layout with no extra square prior and unit variances.
    pub fn single(rows: usize, cols: usize, scale: f64, ratios: Vec<f64>, image_size: usize) -> Self {
        Self {
            feature_map_sizes: vec![(rows, cols)],
            scales: vec![scale],
            aspect_ratios: vec![ratios],
            image_size,
            extra_square_prior: false,
            clip: true,
            variances: (1.0, 1.0),
        }
    }

    /// The SSD300 layout: six maps, scales 0.2..0.9, ratios {1, 2, 1/2, 3, 1/3}
    /// plus the extra square prior.
    pub fn ssd300() -> Self {
        let maps = [38, 19, 10, 5, 3, 1];
        Self {
            feature_map_sizes: maps.iter().map(|&m| (m, m)).collect(),
            scales: linear_scales(0.2, 0.9, maps.len()),
            aspect_ratios: vec![vec![1.0, 2.0, 0.5, 3.0, 1.0 / 3.0]; maps.len()],
            image_size: 300,
            extra_square_prior: true,
            clip: true,
            variances: (0.1, 0.2),
        }
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        let n = self.feature_map_sizes.len();
        if n == 0 {
            return Err(PriorError::Spec("at least one feature map is required".into()));
        }
        if self.scales.len() != n || self.aspect_ratios.len() != n {
            return Err(PriorError::Spec(format!(
                "{n} feature maps but {} scales and {} ratio lists",
                self.scales.len(),
                self.aspect_ratios.len()
            )));
        }
        if let Some((i, _)) = self.feature_map_sizes.iter().enumerate().find(|(_, (r, c))| *r == 0 || *c == 0) {
            return Err(PriorError::Spec(format!("feature map {i} has zero size")));
        }
        if self.scales.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(PriorError::Spec("scales must lie in (0, 1]".into()));
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PriorError::Spec("scales must be strictly increasing".into()));
        }
        for (i, ratios) in self.aspect_ratios.iter().enumerate() {
            if ratios.is_empty() {
                return Err(PriorError::Spec(format!("feature map {i} has no aspect ratio")));
            }
            if ratios.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
                return Err(PriorError::Spec(format!("feature map {i} has a non-positive aspect ratio")));
            }
        }
        if !(self.variances.0 > 0.0 && self.variances.1 > 0.0) {
            return Err(PriorError::Spec("variances must be positive".into()));
        }
        if self.image_size == 0 {
            return Err(PriorError::Spec("image size must be positive".into()));
        }
        Ok(())
    }

    /// Priors per cell on map `i`.
    pub fn priors_per_cell(&self, i: usize) -> usize {
        self.aspect_ratios[i].len() + usize::from(self.extra_square_prior)
    }

    pub fn prior_count(&self) -> usize {
        self.feature_map_sizes
            .iter()
            .enumerate()
            .map(|(i, (r, c))| r * c * self.priors_per_cell(i))
            .sum()
    }
}

/// `n` scales evenly spaced from `min` to `max` inclusive.
pub fn linear_scales(min: f64, max: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![min];
    }
    (0..n).map(|k| min + (max - min) * k as f64 / (n - 1) as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorOrigin {
    pub map: usize,
    pub row: usize,
    pub col: usize,
    /// Index into the map's ratio list; the extra square prior comes last.
    pub ratio: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorGrid {
    pub centers: Vec<CenterSize>,
    pub corners: Vec<BoundingBox>,
    pub origins: Vec<PriorOrigin>,
    pub clipped: bool,
}

impl PriorGrid {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Priors in `(map, row, col, ratio)` order, centered on cell centers.
pub fn generate_priors(spec: &PriorSpec) -> Result<PriorGrid, PriorError> {
    spec.validate()?;
    let total = spec.prior_count();
    let mut grid = PriorGrid {
        centers: Vec::with_capacity(total),
        corners: Vec::with_capacity(total),
        origins: Vec::with_capacity(total),
        clipped: spec.clip,
    };
    for (map, &(rows, cols)) in spec.feature_map_sizes.iter().enumerate() {
        let s = spec.scales[map];
        let s_next = spec.scales.get(map + 1).copied().unwrap_or(1.0);
        let mut sizes: Vec<(f64, f64)> = spec.aspect_ratios[map].iter().map(|a| (s * a.sqrt(), s / a.sqrt())).collect();
        if spec.extra_square_prior {
            let e = (s * s_next).sqrt();
            sizes.push((e, e));
        }
        for row in 0..rows {
            for col in 0..cols {
                let cx = (col as f64 + 0.5) / cols as f64;
                let cy = (row as f64 + 0.5) / rows as f64;
                for (ratio, &(w, h)) in sizes.iter().enumerate() {
                    let raw = CenterSize {
                        cx,
                        cy,
                        w,
                        h,
                        normalized: true,
                    };
                    let corners = if spec.clip {
                        raw.to_corners().clip_unit()
                    } else {
                        raw.to_corners()
                    };
                    grid.centers.push(if spec.clip { corners.to_center_size() } else { raw });
                    grid.corners.push(corners);
                    grid.origins.push(PriorOrigin { map, row, col, ratio });
                }
            }
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorLabel {
    Background,
    Moth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub labels: Vec<PriorLabel>,
    pub assigned: Vec<Option<usize>>,
    /// Number of positive priors.
    pub matched_count: usize,
}

impl MatchResult {
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assigned.iter().enumerate().filter_map(|(p, g)| g.map(|g| (p, g)))
    }
}

/// Assign ground truth to priors.
///
/// A prior is positive when its best IoU over all ground-truth boxes exceeds
/// `iou_threshold`; it is assigned to that argmax box. On top of that every
/// ground-truth box claims a distinct best prior by greedy bipartite matching
/// (highest remaining IoU first, ties to the lowest prior index), so each
/// annotated object has at least one positive.
pub fn match_priors(priors: &PriorGrid, ground_truth: &[BoundingBox], iou_threshold: f64) -> MatchResult {
    let n = priors.len();
    let g = ground_truth.len();
    let mut assigned = vec![None; n];
    if g == 0 {
        return MatchResult {
            labels: vec![PriorLabel::Background; n],
            assigned,
            matched_count: 0,
        };
    }
    let ious: Vec<f64> = priors
        .corners
        .iter()
        .flat_map(|p| ground_truth.iter().map(move |t| p.overlap(t)))
        .collect();
    for p in 0..n {
        let row = &ious[p * g..(p + 1) * g];
        let (best, &best_iou) = row
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, (j, v)| if *v > *acc.1 { (j, v) } else { acc });
        if best_iou > iou_threshold {
            assigned[p] = Some(best);
        }
    }
    let mut gt_done = vec![false; g];
    let mut prior_taken = vec![false; n];
    for _ in 0..g {
        let mut best: Option<(usize, usize, f64)> = None;
        for p in 0..n {
            if prior_taken[p] {
                continue;
            }
            for (j, done) in gt_done.iter().enumerate() {
                if *done {
                    continue;
                }
                let v = ious[p * g + j];
                if best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((p, j, v));
                }
            }
        }
        match best {
            Some((p, j, v)) if v > 0.0 => {
                assigned[p] = Some(j);
                prior_taken[p] = true;
                gt_done[j] = true;
            }
            _ => break,
        }
    }
    let labels: Vec<PriorLabel> = assigned
        .iter()
        .map(|a| if a.is_some() { PriorLabel::Moth } else { PriorLabel::Background })
        .collect();
    let matched_count = assigned.iter().filter(|a| a.is_some()).count();
    MatchResult {
        labels,
        assigned,
        matched_count,
    }
}

/// Regression target `{dx, dy, dw, dh}` of a ground-truth box against a prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetTarget {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl OffsetTarget {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }
}

pub fn encode_offsets(gt: &CenterSize, prior: &CenterSize, variances: (f64, f64)) -> Result<OffsetTarget, PriorError> {
    if !(prior.w > 0.0 && prior.h > 0.0) {
        return Err(PriorError::EmptyPrior);
    }
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(PriorError::EmptyGroundTruth);
    }
    let (vc, vs) = variances;
    Ok(OffsetTarget {
        dx: (gt.cx - prior.cx) / prior.w / vc,
        dy: (gt.cy - prior.cy) / prior.h / vc,
        dw: (gt.w / prior.w).ln() / vs,
        dh: (gt.h / prior.h).ln() / vs,
    })
}

pub fn decode_offsets(off: &OffsetTarget, prior: &CenterSize, variances: (f64, f64)) -> Result<CenterSize, PriorError> {
    if !off.to_array().iter().all(|v| v.is_finite()) {
        return Err(PriorError::NonFiniteOffsets);
    }
    let (vc, vs) = variances;
    let out = CenterSize {
        cx: prior.cx + off.dx * vc * prior.w,
        cy: prior.cy + off.dy * vc * prior.h,
        w: prior.w * (off.dw * vs).exp(),
        h: prior.h * (off.dh * vs).exp(),
        normalized: prior.normalized,
    };
    if ![out.cx, out.cy, out.w, out.h].iter().all(|v| v.is_finite()) {
        return Err(PriorError::NonFiniteOffsets);
    }
    Ok(out)
}
