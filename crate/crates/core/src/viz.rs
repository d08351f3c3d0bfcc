//! PNG renderings of images and deformation fields.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::grids::{warp_array, DeformationField, Interpolation};

fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Grayscale rendering of a `[-1, 1]` array.
pub fn gray(a: ArrayView2<'_, f64>) -> GrayImage {
    let (h, w) = a.dim();
    GrayImage::from_fn(w as u32, h as u32, |c, r| Luma([to_u8(a[[r as usize, c as usize]])]))
}

/// Side-by-side strip of equally sized `[-1, 1]` arrays with a 2 px gap.
pub fn montage(panels: &[ArrayView2<'_, f64>]) -> Result<GrayImage> {
    let first = panels
        .first()
        .ok_or_else(|| Error::InvalidArgument("montage needs at least one panel".into()))?;
    let (h, w) = first.dim();
    if panels.iter().any(|p| p.dim() != (h, w)) {
        return Err(Error::ShapeMismatch("montage panels differ in size".into()));
    }
    let gap = 2;
    let total_w = panels.len() * w + (panels.len() - 1) * gap;
    let mut out = GrayImage::from_pixel(total_w as u32, h as u32, Luma([255]));
    for (k, p) in panels.iter().enumerate() {
        let x0 = k * (w + gap);
        for r in 0..h {
            for c in 0..w {
                out.put_pixel((x0 + c) as u32, r as u32, Luma([to_u8(p[[r, c]])]));
            }
        }
    }
    Ok(out)
}

/// A regular grid (lines every `step` pixels) pulled back through `field`
/// and drawn in red over the grayscale `background`.
pub fn grid_overlay(field: &DeformationField, background: ArrayView2<'_, f64>, step: usize) -> Result<RgbImage> {
    let (h, w) = field.shape();
    if background.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "background {:?} vs field {:?}",
            background.dim(),
            (h, w)
        )));
    }
    let step = step.max(2);
    let lines = Array2::from_shape_fn((h, w), |(r, c)| if r % step == 0 || c % step == 0 { 1.0 } else { 0.0 });
    let warped = warp_array(lines.view(), field, Interpolation::Bilinear)?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let (r, c) = (r as usize, c as usize);
        let g = to_u8(background[[r, c]]) as f64;
        let a = warped[[r, c]].clamp(0.0, 1.0);
        let mix = |target: f64| (g * (1.0 - a) + target * a).round() as u8;
        Rgb([mix(255.0), mix(0.0), mix(0.0)])
    }))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Hue encodes displacement direction, brightness its magnitude relative to
/// the largest displacement in the field.
pub fn displacement_hsv(field: &DeformationField) -> RgbImage {
    let (h, w) = field.shape();
    let (dr, dc) = (field.row_component(), field.col_component());
    let mag = Array2::from_shape_fn((h, w), |(r, c)| dr[[r, c]].hypot(dc[[r, c]]));
    let max = mag.iter().copied().fold(0.0, f64::max);
    RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let (r, c) = (r as usize, c as usize);
        if max == 0.0 {
            return Rgb([0, 0, 0]);
        }
        let hue = (dr[[r, c]].atan2(dc[[r, c]]) / (2.0 * std::f64::consts::PI)).rem_euclid(1.0);
        Rgb(hsv_to_rgb(hue, 1.0, mag[[r, c]] / max))
    })
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path)?;
    Ok(())
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)?;
    Ok(())
}
