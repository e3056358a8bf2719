//! Conversions between 8-bit RGB images and float tensors, plus resampling and cropping.

use image::{Rgb, RgbImage};

use crate::geometry::BoundingBox;
use crate::nn::Tensor3;

/// `RgbImage` to a `(3, h, w)` tensor with values in `[0, 1]`.
pub fn to_tensor(img: &RgbImage) -> Tensor3 {
    from_interleaved(img.as_raw(), img.width() as usize, img.height() as usize).expect("RgbImage buffer matches its size")
}

/// Row-major interleaved RGB bytes to a `(3, h, w)` tensor; `None` when the
/// buffer length is not `3 * width * height`.
pub fn from_interleaved(rgb: &[u8], width: usize, height: usize) -> Option<Tensor3> {
    if rgb.len() != 3 * width * height {
        return None;
    }
    let mut t = Tensor3::zeros(3, height, width);
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            t.set(c, i / width, i % width, px[c] as f64 / 255.0);
        }
    }
    Some(t)
}

pub fn to_rgb(t: &Tensor3) -> RgbImage {
    assert_eq!(t.channels, 3, "rgb tensor expected");
    RgbImage::from_fn(t.width as u32, t.height as u32, |x, y| {
        let q = |c| (t.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    })
}

/// Resample to `out_h x out_w`.
///
/// Upsampling is bilinear; downsampling averages a grid of bilinear samples
/// covering each output pixel's footprint, so fine texture is low-passed
/// rather than aliased.
pub fn resize(t: &Tensor3, out_h: usize, out_w: usize) -> Tensor3 {
    if t.height == out_h && t.width == out_w {
        return t.clone();
    }
    let sy = t.height as f64 / out_h as f64;
    let sx = t.width as f64 / out_w as f64;
    let ny = sy.ceil().max(1.0) as usize;
    let nx = sx.ceil().max(1.0) as usize;
    let mut out = Tensor3::zeros(t.channels, out_h, out_w);
    let inv = 1.0 / (nx * ny) as f64;
    for oy in 0..out_h {
        for ox in 0..out_w {
            for c in 0..t.channels {
                let mut acc = 0.0;
                for jy in 0..ny {
                    let fy = (oy as f64 + (jy as f64 + 0.5) / ny as f64) * sy - 0.5;
                    for jx in 0..nx {
                        let fx = (ox as f64 + (jx as f64 + 0.5) / nx as f64) * sx - 0.5;
                        acc += bilinear(t, c, fy, fx);
                    }
                }
                out.set(c, oy, ox, acc * inv);
            }
        }
    }
    out
}

fn bilinear(t: &Tensor3, c: usize, fy: f64, fx: f64) -> f64 {
    let fy = fy.clamp(0.0, (t.height - 1) as f64);
    let fx = fx.clamp(0.0, (t.width - 1) as f64);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(t.height - 1), (x0 + 1).min(t.width - 1));
    let (ay, ax) = (fy - y0 as f64, fx - x0 as f64);
    let top = t.get(c, y0, x0) * (1.0 - ax) + t.get(c, y0, x1) * ax;
    let bottom = t.get(c, y1, x0) * (1.0 - ax) + t.get(c, y1, x1) * ax;
    top * (1.0 - ay) + bottom * ay
}

/// Integer pixel window `[x0, x1) x [y0, y1)` covering `b`, clipped to the image.
/// Always at least one pixel wide and tall.
pub fn pixel_window(b: &BoundingBox, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let x0 = (b.x_min.floor().max(0.0) as usize).min(width - 1);
    let y0 = (b.y_min.floor().max(0.0) as usize).min(height - 1);
    let x1 = (b.x_max.ceil().max(0.0) as usize).clamp(x0 + 1, width);
    let y1 = (b.y_max.ceil().max(0.0) as usize).clamp(y0 + 1, height);
    (x0, y0, x1, y1)
}

/// Crop the pixels covered by a pixel-space box.
pub fn crop(t: &Tensor3, b: &BoundingBox) -> Tensor3 {
    let (x0, y0, x1, y1) = pixel_window(b, t.width, t.height);
    crop_window(t, x0, y0, x1, y1)
}

pub fn crop_window(t: &Tensor3, x0: usize, y0: usize, x1: usize, y1: usize) -> Tensor3 {
    let (w, h) = (x1 - x0, y1 - y0);
    let mut out = Tensor3::zeros(t.channels, h, w);
    for c in 0..t.channels {
        for y in 0..h {
            let src = t.index(c, y0 + y, x0);
            let dst = out.index(c, y, 0);
            out.data[dst..dst + w].copy_from_slice(&t.data[src..src + w]);
        }
    }
    out
}

/// Crop and resample to a square network input.
pub fn crop_resize(t: &Tensor3, b: &BoundingBox, size: usize) -> Tensor3 {
    resize(&crop(t, b), size, size)
}

/// Draw a one-pixel rectangle outline.
pub fn draw_rect(img: &mut RgbImage, b: &BoundingBox, color: [u8; 3]) {
    if img.width() == 0 || img.height() == 0 {
        return;
    }
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = (b.x_min.floor() as i64).clamp(0, w - 1);
    let y0 = (b.y_min.floor() as i64).clamp(0, h - 1);
    let x1 = ((b.x_max.ceil() as i64) - 1).clamp(0, w - 1);
    let y1 = ((b.y_max.ceil() as i64) - 1).clamp(0, h - 1);
    for x in x0..=x1 {
        img.put_pixel(x as u32, y0 as u32, Rgb(color));
        img.put_pixel(x as u32, y1 as u32, Rgb(color));
    }
    for y in y0..=y1 {
        img.put_pixel(x0 as u32, y as u32, Rgb(color));
        img.put_pixel(x1 as u32, y as u32, Rgb(color));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let t = Tensor3::from_vec(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(resize(&t, 2, 2), t);
        let c = Tensor3::from_vec(1, 4, 4, vec![0.5; 16]);
        for v in resize(&c, 3, 7).data {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn downsampling_averages_fine_stripes() {
        let mut t = Tensor3::zeros(1, 8, 8);
        for y in 0..8 {
            for x in 0..8 {
                t.set(0, y, x, (x % 2) as f64);
            }
        }
        for v in resize(&t, 4, 4).data {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn rgb_round_trip() {
        let img = RgbImage::from_fn(3, 2, |x, y| Rgb([x as u8 * 40, y as u8 * 90, 7]));
        assert_eq!(to_rgb(&to_tensor(&img)), img);
    }

    #[test]
    fn crop_takes_covered_pixels() {
        let t = Tensor3::from_vec(1, 3, 3, (0..9).map(|v| v as f64).collect());
        let b = BoundingBox::new(0.5, 1.0, 2.0, 3.0).unwrap();
        let c = crop(&t, &b);
        assert_eq!(c.shape(), (1, 2, 2));
        assert_eq!(c.data, vec![3.0, 4.0, 6.0, 7.0]);
    }
}
