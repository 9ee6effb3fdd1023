//! Training-data augmentation: mirror, rotate, shift, brightness.

use serde::{Deserialize, Serialize};

use crate::raster::RgbRaster;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum AugmentOp {
    /// Horizontal flip.
    Mirror,
    /// Degrees in [-180, 180] about the image center; bilinear, zero fill.
    Rotate { degrees: f64 },
    /// Translate by whole pixels; zero fill.
    Shift { dx: i64, dy: i64 },
    /// Saturating per-channel add.
    Brightness { delta: i16 },
}

pub fn augment(img: &RgbRaster, op: AugmentOp) -> RgbRaster {
    match op {
        AugmentOp::Mirror => mirror(img),
        AugmentOp::Rotate { degrees } => rotate(img, degrees),
        AugmentOp::Shift { dx, dy } => shift(img, dx, dy),
        AugmentOp::Brightness { delta } => brightness(img, delta),
    }
}

fn mirror(img: &RgbRaster) -> RgbRaster {
    let mut out = RgbRaster::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            out.put(img.width - 1 - x, y, img.get(x, y));
        }
    }
    out
}

fn shift(img: &RgbRaster, dx: i64, dy: i64) -> RgbRaster {
    let (w, h) = (img.width as i64, img.height as i64);
    let mut out = RgbRaster::new(img.width, img.height);
    for y in 0..h {
        let sy = y - dy;
        if !(0..h).contains(&sy) {
            continue;
        }
        for x in 0..w {
            let sx = x - dx;
            if (0..w).contains(&sx) {
                out.put(x as usize, y as usize, img.get(sx as usize, sy as usize));
            }
        }
    }
    out
}

fn brightness(img: &RgbRaster, delta: i16) -> RgbRaster {
    let data = img
        .data
        .iter()
        .map(|&v| (v as i16 + delta).clamp(0, 255) as u8)
        .collect();
    RgbRaster {
        width: img.width,
        height: img.height,
        data,
    }
}

fn rotate(img: &RgbRaster, degrees: f64) -> RgbRaster {
    let (w, h) = (img.width, img.height);
    let mut out = RgbRaster::new(w, h);
    if w == 0 || h == 0 {
        return out;
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    const EDGE_EPS: f64 = 1e-9;
    for y in 0..h {
        for x in 0..w {
            // inverse map: rotate output point by -theta
            let (ux, uy) = (x as f64 - cx, y as f64 - cy);
            let mut sx = c * ux + s * uy + cx;
            let mut sy = -s * ux + c * uy + cy;
            if sx < -EDGE_EPS || sy < -EDGE_EPS || sx > xmax + EDGE_EPS || sy > ymax + EDGE_EPS {
                continue;
            }
            sx = sx.clamp(0.0, xmax);
            sy = sy.clamp(0.0, ymax);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let (a, b, cc, d) = (img.get(x0, y0), img.get(x1, y0), img.get(x0, y1), img.get(x1, y1));
            let mut px = [0u8; 3];
            for k in 0..3 {
                let top = a[k] as f64 * (1.0 - fx) + b[k] as f64 * fx;
                let bot = cc[k] as f64 * (1.0 - fx) + d[k] as f64 * fx;
                px[k] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.put(x, y, px);
        }
    }
    out
}
