//! Synthetic insect scenes with pixel-exact ground truth.
//!
//! Each "species" is a textured body drawn on a light, noisy background.
//! Species share the same color range and body shapes and differ only in
//! their surface pattern, so telling them apart needs enough resolution on
//! the insect itself.

use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetEntry, DatasetIndex, LabeledBox};
use crate::geometry::BoundingBox;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyShape {
    Ellipse,
    Diamond,
    Rectangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    Plain,
    HorizontalStripes { period: u32 },
    VerticalStripes { period: u32 },
    DiagonalStripes { period: u32 },
    Checker { period: u32 },
    Spots { period: u32 },
}

impl Pattern {
    /// Whether the pattern darkens the body pixel at local coordinates `(lx, ly)`.
    fn dark(&self, lx: u32, ly: u32) -> bool {
        let half = |p: u32| (p / 2).max(1);
        match *self {
            Pattern::Plain => false,
            Pattern::HorizontalStripes { period } => (ly / half(period)) % 2 == 1,
            Pattern::VerticalStripes { period } => (lx / half(period)) % 2 == 1,
            Pattern::DiagonalStripes { period } => ((lx + ly) / half(period)) % 2 == 1,
            Pattern::Checker { period } => (lx / half(period) + ly / half(period)) % 2 == 1,
            Pattern::Spots { period } => (lx % period.max(2)) < half(period) && (ly % period.max(2)) < half(period),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesSpec {
    pub name: String,
    pub shapes: Vec<BodyShape>,
    pub pattern: Pattern,
    /// Per-channel body colour range in `[0, 1]`.
    pub color_lo: [f64; 3],
    pub color_hi: [f64; 3],
    /// Fraction by which pattern pixels are darkened.
    pub pattern_strength: f64,
    /// Body width range in pixels.
    pub size: (u32, u32),
    /// Height / width range.
    pub aspect: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub width: u32,
    pub height: u32,
    pub background: [f64; 3],
    /// Uniform per-image shift of the background colour.
    pub background_jitter: f64,
    /// Half-width of uniform per-pixel background noise.
    pub noise: f64,
    pub species: Vec<SpeciesSpec>,
    /// Probability that a scene holds exactly one insect.
    pub single_insect_prob: f64,
    /// Multi-insect scenes hold between 2 and this many insects.
    pub max_insects: usize,
    /// Allow different species in one scene. Off by default so every scene has one label.
    #[serde(default)]
    pub mixed_species: bool,
    /// Minimum free pixels between insects and from the canvas border.
    pub margin: u32,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    /// `n` species over one shared colour range, distinguished by pattern.
    pub fn with_species(n: usize, seed: u64) -> Self {
        let patterns = [
            Pattern::HorizontalStripes { period: 6 },
            Pattern::VerticalStripes { period: 6 },
            Pattern::Spots { period: 8 },
            Pattern::Checker { period: 6 },
            Pattern::Plain,
            Pattern::DiagonalStripes { period: 6 },
        ];
        let species = (0..n)
            .map(|i| SpeciesSpec {
                name: format!("species_{i:02}"),
                shapes: vec![BodyShape::Ellipse, BodyShape::Diamond, BodyShape::Rectangle],
                pattern: patterns[i % patterns.len()],
                color_lo: [0.35, 0.2, 0.1],
                color_hi: [0.7, 0.5, 0.35],
                pattern_strength: 0.6,
                size: (28, 44),
                aspect: (0.7, 1.3),
            })
            .collect();
        Self {
            width: 128,
            height: 128,
            background: [0.9, 0.9, 0.88],
            background_jitter: 0.04,
            noise: 0.03,
            species,
            single_insect_prob: 0.92,
            max_insects: 3,
            mixed_species: false,
            margin: 2,
            seed,
        }
    }
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self::with_species(5, 0)
    }
}

/// One rendered scene before it is wrapped in a dataset entry.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: RgbImage,
    pub boxes: Vec<LabeledBox>,
}

const PLACEMENT_ATTEMPTS: usize = 200;

fn validate(spec: &SyntheticSceneSpec) -> Result<(), DataError> {
    if spec.species.is_empty() {
        return Err(DataError::Synthetic("at least one species is required".into()));
    }
    if !(0.0..=1.0).contains(&spec.single_insect_prob) {
        return Err(DataError::Synthetic("single_insect_prob must lie in [0, 1]".into()));
    }
    for s in &spec.species {
        let (min, max) = s.size;
        let tallest = (max as f64 * s.aspect.1).ceil() as u32;
        if min == 0 || min > max || s.aspect.0 <= 0.0 || s.aspect.0 > s.aspect.1 {
            return Err(DataError::Synthetic(format!("species `{}` has an empty size range", s.name)));
        }
        if max + 2 * spec.margin > spec.width || tallest + 2 * spec.margin > spec.height {
            return Err(DataError::Synthetic(format!(
                "species `{}` (up to {max}x{tallest}) cannot fit a {}x{} canvas",
                s.name, spec.width, spec.height
            )));
        }
    }
    Ok(())
}

/// Number of insects per scene, drawn from the configured single/multi mixture.
pub fn sample_insect_count<R: Rng>(spec: &SyntheticSceneSpec, rng: &mut R) -> usize {
    if spec.max_insects < 2 || rng.random_bool(spec.single_insect_prob) {
        1
    } else {
        rng.random_range(2..=spec.max_insects)
    }
}

/// Render scene number `index`; a pure function of `(spec.seed, index)`.
pub fn render_scene(spec: &SyntheticSceneSpec, index: usize) -> Result<Scene, DataError> {
    validate(spec)?;
    let mut rng = seed::rng(spec.seed, &[seed::tag::SCENE, index as u64]);
    let count = sample_insect_count(spec, &mut rng);
    let scene_species = rng.random_range(0..spec.species.len());
    let shift = if spec.background_jitter > 0.0 {
        rng.random_range(-spec.background_jitter..=spec.background_jitter)
    } else {
        0.0
    };
    let bg = spec.background.map(|c| (c + shift).clamp(0.0, 1.0));
    let mut img = RgbImage::from_fn(spec.width, spec.height, |_, _| Rgb([0, 0, 0]));
    for px in img.pixels_mut() {
        let mut v = [0u8; 3];
        for c in 0..3 {
            let n = if spec.noise > 0.0 {
                rng.random_range(-spec.noise..=spec.noise)
            } else {
                0.0
            };
            v[c] = quantize(bg[c] + n);
        }
        *px = Rgb(v);
    }

    let mut boxes: Vec<LabeledBox> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = if spec.mixed_species {
            rng.random_range(0..spec.species.len())
        } else {
            scene_species
        };
        let sp = &spec.species[class];
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let bw = rng.random_range(sp.size.0..=sp.size.1);
            let aspect = if sp.aspect.1 > sp.aspect.0 {
                rng.random_range(sp.aspect.0..=sp.aspect.1)
            } else {
                sp.aspect.0
            };
            let bh = ((bw as f64 * aspect).round() as u32).max(1);
            let m = spec.margin;
            if bw + 2 * m > spec.width || bh + 2 * m > spec.height {
                continue;
            }
            let x0 = rng.random_range(m..=spec.width - bw - m);
            let y0 = rng.random_range(m..=spec.height - bh - m);
            let rect = BoundingBox {
                x_min: x0 as f64,
                y_min: y0 as f64,
                x_max: (x0 + bw) as f64,
                y_max: (y0 + bh) as f64,
                normalized: false,
            };
            let clear = boxes.iter().all(|b| grow(&b.bbox, m as f64).intersection_area(&rect) == 0.0);
            if !clear {
                continue;
            }
            let shape = sp.shapes[rng.random_range(0..sp.shapes.len())];
            let color: [f64; 3] = std::array::from_fn(|c| {
                let (lo, hi) = (sp.color_lo[c], sp.color_hi[c]);
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            });
            if let Some(hull) = draw_insect(&mut img, x0, y0, bw, bh, shape, sp, color) {
                boxes.push(LabeledBox { bbox: hull, class });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(DataError::Synthetic(format!(
                "could not place insect {} of scene {index} without overlap",
                boxes.len() + 1
            )));
        }
    }
    Ok(Scene { image: img, boxes })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn inside(shape: BodyShape, u: f64, v: f64) -> bool {
    match shape {
        BodyShape::Ellipse => u * u + v * v <= 1.0,
        BodyShape::Diamond => u.abs() + v.abs() <= 1.0,
        BodyShape::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
    }
}

/// Paint one insect inside the `w x h` rectangle at `(x0, y0)`; returns the hull of painted pixels.
#[allow(clippy::too_many_arguments)]
fn draw_insect(
    img: &mut RgbImage,
    x0: u32,
    y0: u32,
    w: u32,
    h: u32,
    shape: BodyShape,
    sp: &SpeciesSpec,
    color: [f64; 3],
) -> Option<BoundingBox> {
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (mut xmin, mut ymin, mut xmax, mut ymax) = (u32::MAX, u32::MAX, 0u32, 0u32);
    for ly in 0..h {
        for lx in 0..w {
            let u = (lx as f64 + 0.5 - cx) / cx;
            let v = (ly as f64 + 0.5 - cy) / cy;
            if !inside(shape, u, v) {
                continue;
            }
            let k = if sp.pattern.dark(lx, ly) { 1.0 - sp.pattern_strength } else { 1.0 };
            let px = Rgb(color.map(|c| quantize(c * k)));
            img.put_pixel(x0 + lx, y0 + ly, px);
            xmin = xmin.min(x0 + lx);
            ymin = ymin.min(y0 + ly);
            xmax = xmax.max(x0 + lx);
            ymax = ymax.max(y0 + ly);
        }
    }
    (xmin != u32::MAX).then(|| BoundingBox {
        x_min: xmin as f64,
        y_min: ymin as f64,
        x_max: (xmax + 1) as f64,
        y_max: (ymax + 1) as f64,
        normalized: false,
    })
}

fn grow(b: &BoundingBox, p: f64) -> BoundingBox {
    BoundingBox {
        x_min: b.x_min - p,
        y_min: b.y_min - p,
        x_max: b.x_max + p,
        y_max: b.y_max + p,
        normalized: b.normalized,
    }
}

/// Render `n_images` scenes into an in-memory dataset.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, n_images: usize) -> Result<DatasetIndex, DataError> {
    validate(spec)?;
    let mut entries = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let scene = render_scene(spec, i)?;
        entries.push(DatasetEntry {
            path: format!("images/{i:06}.png"),
            width: spec.width,
            height: spec.height,
            label: super::annotations::common_label(&scene.boxes),
            boxes: scene.boxes,
            pixels: Some(Arc::new(scene.image)),
        });
    }
    Ok(DatasetIndex {
        root: None,
        classes: spec.species.iter().map(|s| s.name.clone()).collect(),
        entries,
        split: None,
    })
}
