//! Axis-aligned box arithmetic shared by every stage of the pipeline.
//!
//! Boxes are continuous rectangles: a pixel at integer column `x` covers
//! `[x, x + 1)`, and no `+1` convention is applied to widths or areas.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box coordinates must be finite, got ({0}, {1}, {2}, {3})")]
    NonFinite(f64, f64, f64, f64),
    #[error("inverted box: x_min={x_min} x_max={x_max} y_min={y_min} y_max={y_max}")]
    Inverted { x_min: f64, y_min: f64, x_max: f64, y_max: f64 },
    #[error("normalized box has coordinates outside [0, 1]")]
    OutOfUnitRange,
    #[error("cannot compare a normalized box with a pixel-space box")]
    MixedNormalization,
    #[error("iou threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
}

/// Corner-form rectangle, in pixels or in `[0, 1]` when `normalized` is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    #[serde(default)]
    pub normalized: bool,
}

/// Center-size form of a [`BoundingBox`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterSize {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default)]
    pub normalized: bool,
}

impl BoundingBox {
    /// Pixel-space box; validates ordering and finiteness.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
            normalized: false,
        };
        b.validate()?;
        Ok(b)
    }

    /// Box in normalized image coordinates; every coordinate must lie in `[0, 1]`.
    pub fn normalized(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
            normalized: true,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let Self {
            x_min,
            y_min,
            x_max,
            y_max,
            ..
        } = *self;
        if !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite()) {
            return Err(GeometryError::NonFinite(x_min, y_min, x_max, y_max));
        }
        if x_min > x_max || y_min > y_max {
            return Err(GeometryError::Inverted {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        if self.normalized && [x_min, y_min, x_max, y_max].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(GeometryError::OutOfUnitRange);
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// IoU without the normalization check. Zero-area unions yield 0.
    pub fn overlap(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    pub fn to_center_size(&self) -> CenterSize {
        CenterSize {
            cx: 0.5 * (self.x_min + self.x_max),
            cy: 0.5 * (self.y_min + self.y_max),
            w: self.width(),
            h: self.height(),
            normalized: self.normalized,
        }
    }

    /// Clamp to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BoundingBox {
        let x_min = self.x_min.clamp(0.0, width);
        let x_max = self.x_max.clamp(0.0, width);
        let y_min = self.y_min.clamp(0.0, height);
        let y_max = self.y_max.clamp(0.0, height);
        BoundingBox {
            x_min,
            y_min,
            x_max: x_max.max(x_min),
            y_max: y_max.max(y_min),
            normalized: self.normalized,
        }
    }

    pub fn clip_unit(&self) -> BoundingBox {
        self.clip(1.0, 1.0)
    }

    /// Map a normalized box into pixel space of a `width x height` image.
    pub fn to_pixels(&self, width: f64, height: f64) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min * width,
            y_min: self.y_min * height,
            x_max: self.x_max * width,
            y_max: self.y_max * height,
            normalized: false,
        }
    }

    /// Map a pixel box into normalized coordinates of a `width x height` image.
    pub fn to_normalized(&self, width: f64, height: f64) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min / width,
            y_min: self.y_min / height,
            x_max: self.x_max / width,
            y_max: self.y_max / height,
            normalized: true,
        }
    }

    /// Scale each axis independently, e.g. to move between image resolutions.
    pub fn scale(&self, sx: f64, sy: f64) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min * sx,
            y_min: self.y_min * sy,
            x_max: self.x_max * sx,
            y_max: self.y_max * sy,
            normalized: self.normalized,
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
            normalized: self.normalized,
        }
    }

    /// Grow each side by `fraction` of the box's own width/height.
    pub fn pad(&self, fraction: f64) -> BoundingBox {
        let px = self.width() * fraction;
        let py = self.height() * fraction;
        BoundingBox {
            x_min: self.x_min - px,
            y_min: self.y_min - py,
            x_max: self.x_max + px,
            y_max: self.y_max + py,
            normalized: self.normalized,
        }
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        other.x_min >= self.x_min && other.y_min >= self.y_min && other.x_max <= self.x_max && other.y_max <= self.y_max
    }
}

impl CenterSize {
    pub fn to_corners(&self) -> BoundingBox {
        BoundingBox {
            x_min: self.cx - 0.5 * self.w,
            y_min: self.cy - 0.5 * self.h,
            x_max: self.cx + 0.5 * self.w,
            y_max: self.cy + 0.5 * self.h,
            normalized: self.normalized,
        }
    }
}

impl From<BoundingBox> for CenterSize {
    fn from(b: BoundingBox) -> Self {
        b.to_center_size()
    }
}

impl From<CenterSize> for BoundingBox {
    fn from(c: CenterSize) -> Self {
        c.to_corners()
    }
}

/// The two box parameterizations accepted by [`convert`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    Corners,
    CenterSize,
}

/// A box in either parameterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnyBox {
    Corners(BoundingBox),
    CenterSize(CenterSize),
}

pub fn convert(b: AnyBox, target: Parameterization) -> AnyBox {
    match (b, target) {
        (AnyBox::Corners(c), Parameterization::CenterSize) => AnyBox::CenterSize(c.to_center_size()),
        (AnyBox::CenterSize(c), Parameterization::Corners) => AnyBox::Corners(c.to_corners()),
        (same, _) => same,
    }
}

/// Intersection over union of two boxes in the same coordinate space.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64, GeometryError> {
    if a.normalized != b.normalized {
        return Err(GeometryError::MixedNormalization);
    }
    Ok(a.overlap(b))
}

/// A box with a confidence score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BoundingBox, score: f64) -> Self {
        Self { bbox, score }
    }
}

/// Total order used by NMS: score descending, then corners ascending.
pub fn nms_order(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
        .then(a.bbox.x_max.total_cmp(&b.bbox.x_max))
        .then(a.bbox.y_max.total_cmp(&b.bbox.y_max))
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited in [`nms_order`]; a candidate is kept when its IoU
/// with every previously kept box is at most `iou_threshold`.
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64, max_keep: usize) -> Result<Vec<ScoredBox>, GeometryError> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(GeometryError::BadThreshold(iou_threshold));
    }
    let mut sorted = boxes.to_vec();
    sorted.sort_by(nms_order);
    let mut kept: Vec<ScoredBox> = Vec::new();
    for cand in sorted {
        if kept.len() >= max_keep {
            break;
        }
        if kept.iter().all(|k| k.bbox.overlap(&cand.bbox) <= iou_threshold) {
            kept.push(cand);
        }
    }
    Ok(kept)
}
