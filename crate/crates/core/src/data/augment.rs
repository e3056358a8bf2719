//! Box-aware image augmentation: random crop, horizontal/vertical flips and
//! brightness/contrast/saturation jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::BoundingBox;
use crate::imaging::crop_window;
use crate::nn::Tensor3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropAugment {
    /// Side length of the crop as a fraction of the image side, drawn uniformly.
    pub min_scale: f64,
    pub max_scale: f64,
    /// Boxes keeping less than this fraction of their area are dropped.
    pub min_visible: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterAugment {
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub crop: Option<CropAugment>,
    pub jitter: Option<JitterAugment>,
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            crop: None,
            jitter: None,
        }
    }
}

impl Default for AugmentConfig {
    /// Crop scale in `[0.7, 1.0]`, both flips at probability 0.5, jitter factors in `[0.8, 1.2]`.
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            crop: Some(CropAugment {
                min_scale: 0.7,
                max_scale: 1.0,
                min_visible: 0.3,
            }),
            jitter: Some(JitterAugment {
                brightness: (0.8, 1.2),
                contrast: (0.8, 1.2),
                saturation: (0.8, 1.2),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub image: Tensor3,
    pub boxes: Vec<BoundingBox>,
    /// Index of the source box for each entry of `boxes`.
    pub kept: Vec<usize>,
}

const CROP_ATTEMPTS: usize = 10;

/// Apply `config` to `image` and remap `boxes` (pixel or normalized).
///
/// When the input has boxes and a crop would drop all of them, the crop is
/// resampled up to ten times and skipped after that.
pub fn augment(image: &Tensor3, boxes: &[BoundingBox], config: &AugmentConfig, seed: u64) -> Augmented {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (image.width as f64, image.height as f64);
    let mut out_img = image.clone();
    let mut out_boxes: Vec<BoundingBox> = boxes.to_vec();
    let mut kept: Vec<usize> = (0..boxes.len()).collect();

    if let Some(crop) = &config.crop {
        let mut accepted = None;
        for _ in 0..CROP_ATTEMPTS {
            let s = if crop.max_scale > crop.min_scale {
                rng.random_range(crop.min_scale..=crop.max_scale)
            } else {
                crop.min_scale
            };
            let cw = ((s * w).round() as usize).clamp(1, image.width);
            let ch = ((s * h).round() as usize).clamp(1, image.height);
            let x0 = rng.random_range(0..=image.width - cw);
            let y0 = rng.random_range(0..=image.height - ch);
            let window = BoundingBox {
                x_min: x0 as f64,
                y_min: y0 as f64,
                x_max: (x0 + cw) as f64,
                y_max: (y0 + ch) as f64,
                normalized: false,
            };
            let mut nb = Vec::new();
            let mut nk = Vec::new();
            for (i, b) in boxes.iter().enumerate() {
                let pb = if b.normalized { b.to_pixels(w, h) } else { *b };
                let area = pb.area();
                if area <= 0.0 || pb.intersection_area(&window) / area < crop.min_visible {
                    continue;
                }
                let c = pb.clip(window.x_max, window.y_max);
                let c = BoundingBox {
                    x_min: c.x_min.max(window.x_min),
                    y_min: c.y_min.max(window.y_min),
                    ..c
                }
                .translate(-window.x_min, -window.y_min);
                nb.push(if b.normalized { c.to_normalized(cw as f64, ch as f64) } else { c });
                nk.push(i);
            }
            if boxes.is_empty() || !nb.is_empty() {
                accepted = Some((x0, y0, cw, ch, nb, nk));
                break;
            }
        }
        match accepted {
            Some((x0, y0, cw, ch, nb, nk)) => {
                out_img = crop_window(image, x0, y0, x0 + cw, y0 + ch);
                out_boxes = nb;
                kept = nk;
            }
            None => log::debug!("crop removed every box {CROP_ATTEMPTS} times; keeping the full image"),
        }
    }

    if config.hflip_prob > 0.0 && rng.random_bool(config.hflip_prob.min(1.0)) {
        out_img = flip_horizontal(&out_img);
        let fw = out_img.width as f64;
        for b in out_boxes.iter_mut() {
            *b = flip_box_horizontal(b, fw);
        }
    }
    if config.vflip_prob > 0.0 && rng.random_bool(config.vflip_prob.min(1.0)) {
        out_img = flip_vertical(&out_img);
        let fh = out_img.height as f64;
        for b in out_boxes.iter_mut() {
            *b = flip_box_vertical(b, fh);
        }
    }
    if let Some(j) = &config.jitter {
        let mut draw = |(lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let (b, c, s) = (draw(j.brightness), draw(j.contrast), draw(j.saturation));
        color_jitter(&mut out_img, b, c, s);
    }
    Augmented {
        image: out_img,
        boxes: out_boxes,
        kept,
    }
}

/// Mirror a box across the vertical axis of an image `width` wide (1 for normalized boxes).
pub fn flip_box_horizontal(b: &BoundingBox, width: f64) -> BoundingBox {
    let w = if b.normalized { 1.0 } else { width };
    BoundingBox {
        x_min: w - b.x_max,
        x_max: w - b.x_min,
        ..*b
    }
}

pub fn flip_box_vertical(b: &BoundingBox, height: f64) -> BoundingBox {
    let h = if b.normalized { 1.0 } else { height };
    BoundingBox {
        y_min: h - b.y_max,
        y_max: h - b.y_min,
        ..*b
    }
}

pub fn flip_horizontal(t: &Tensor3) -> Tensor3 {
    let mut out = t.clone();
    for c in 0..t.channels {
        for y in 0..t.height {
            let row = t.index(c, y, 0);
            out.data[row..row + t.width].reverse();
        }
    }
    out
}

pub fn flip_vertical(t: &Tensor3) -> Tensor3 {
    let mut out = t.clone();
    for c in 0..t.channels {
        for y in 0..t.height {
            let src = t.index(c, y, 0);
            let dst = t.index(c, t.height - 1 - y, 0);
            out.data[dst..dst + t.width].copy_from_slice(&t.data[src..src + t.width]);
        }
    }
    out
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Brightness scaling, contrast around the mean luma, then saturation around per-pixel luma.
pub fn color_jitter(t: &mut Tensor3, brightness: f64, contrast: f64, saturation: f64) {
    if t.channels != 3 {
        return;
    }
    let n = t.height * t.width;
    for v in t.data.iter_mut() {
        *v *= brightness;
    }
    let mean = (0..n).map(|i| luma(t.data[i], t.data[n + i], t.data[2 * n + i])).sum::<f64>() / n.max(1) as f64;
    for v in t.data.iter_mut() {
        *v = (*v - mean) * contrast + mean;
    }
    for i in 0..n {
        let g = luma(t.data[i], t.data[n + i], t.data[2 * n + i]);
        for c in 0..3 {
            let v = &mut t.data[c * n + i];
            *v = (g + (*v - g) * saturation).clamp(0.0, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(w: usize, h: usize) -> Tensor3 {
        Tensor3::from_vec(3, h, w, (0..3 * w * h).map(|i| (i % 17) as f64 / 17.0).collect())
    }

    #[test]
    fn identity_config_is_noop() {
        let t = img(9, 7);
        let b = vec![BoundingBox::new(1.0, 1.0, 4.0, 5.0).unwrap()];
        let a = augment(&t, &b, &AugmentConfig::identity(), 3);
        assert_eq!(a.image, t);
        assert_eq!(a.boxes, b);
    }

    #[test]
    fn horizontal_flip_of_normalized_box() {
        let b = BoundingBox::normalized(0.1, 0.2, 0.4, 0.5).unwrap();
        let f = flip_box_horizontal(&b, 123.0);
        assert!((f.x_min - 0.6).abs() < 1e-12 && (f.x_max - 0.9).abs() < 1e-12);
        assert_eq!((f.y_min, f.y_max), (0.2, 0.5));
    }

    #[test]
    fn double_flip_restores() {
        let t = img(6, 4);
        let b = vec![BoundingBox::new(1.0, 0.0, 3.0, 2.0).unwrap()];
        let cfg = AugmentConfig {
            hflip_prob: 1.0,
            ..AugmentConfig::identity()
        };
        let once = augment(&t, &b, &cfg, 0);
        assert_eq!(once.boxes[0], BoundingBox::new(3.0, 0.0, 5.0, 2.0).unwrap());
        let twice = augment(&once.image, &once.boxes, &cfg, 0);
        assert_eq!(twice.image, t);
        assert_eq!(twice.boxes, b);
    }

    #[test]
    fn flip_moves_pixels_with_boxes() {
        let mut t = Tensor3::zeros(3, 4, 8);
        for c in 0..3 {
            t.set(c, 1, 1, 1.0);
        }
        let b = vec![BoundingBox::new(1.0, 1.0, 2.0, 2.0).unwrap()];
        let cfg = AugmentConfig {
            hflip_prob: 1.0,
            vflip_prob: 1.0,
            ..AugmentConfig::identity()
        };
        let a = augment(&t, &b, &cfg, 0);
        let bb = a.boxes[0];
        assert_eq!(a.image.get(0, bb.y_min as usize, bb.x_min as usize), 1.0);
    }

    #[test]
    fn crop_drops_mostly_hidden_boxes() {
        let t = img(100, 100);
        let boxes = vec![
            BoundingBox::new(40.0, 40.0, 60.0, 60.0).unwrap(),
            BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
        ];
        let cfg = AugmentConfig {
            crop: Some(CropAugment {
                min_scale: 0.5,
                max_scale: 0.5,
                min_visible: 0.3,
            }),
            ..AugmentConfig::identity()
        };
        for seed in 0..20 {
            let a = augment(&t, &boxes, &cfg, seed);
            for (b, &k) in a.boxes.iter().zip(&a.kept) {
                let orig = boxes[k];
                assert!(b.area() >= 0.3 * orig.area() - 1e-9);
            }
        }
    }

    #[test]
    fn same_seed_same_output() {
        let t = img(30, 20);
        let b = vec![BoundingBox::new(5.0, 5.0, 20.0, 15.0).unwrap()];
        let cfg = AugmentConfig::default();
        let a = augment(&t, &b, &cfg, 42);
        let c = augment(&t, &b, &cfg, 42);
        assert_eq!(a.image, c.image);
        assert_eq!(a.boxes, c.boxes);
    }

    proptest! {
        #[test]
        fn boxes_stay_in_bounds(seed in any::<u64>(), x in 0.0..20.0f64, y in 0.0..15.0f64, bw in 1.0..10.0f64, bh in 1.0..5.0f64) {
            let t = img(30, 20);
            let b = vec![BoundingBox::new(x, y, x + bw, y + bh).unwrap()];
            let a = augment(&t, &b, &AugmentConfig::default(), seed);
            for bb in &a.boxes {
                prop_assert!(bb.x_min >= 0.0 && bb.y_min >= 0.0);
                prop_assert!(bb.x_max <= a.image.width as f64 + 1e-9 && bb.y_max <= a.image.height as f64 + 1e-9);
            }
            prop_assert!(a.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
