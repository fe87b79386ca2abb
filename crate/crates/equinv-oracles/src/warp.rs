//! Brute-force inverse-map resampler. Walks every output pixel, undoes the
//! transform chain step by step in scalar arithmetic (no composed matrix),
//! and bilinearly samples the input with zero padding.

use ndarray::Array3;

// cos/sin of k quarter turns, exact.
const QC: [f64; 4] = [1.0, 0.0, -1.0, 0.0];
const QS: [f64; 4] = [0.0, 1.0, 0.0, -1.0];

pub struct WarpParams {
    pub rot_quarters: usize,
    pub scale: f64,
    pub aspect: f64,
    pub translate_x: f64,
    pub translate_y: f64,
    pub shear_deg: f64,
}

fn sample(img: &Array3<f64>, sy: f64, sx: f64, ch: usize) -> f64 {
    let (h, w, _) = img.dim();
    let y0 = sy.floor();
    let x0 = sx.floor();
    let dy = sy - y0;
    let dx = sx - x0;
    let mut acc = 0.0;
    for (oy, wy) in [(0i64, 1.0 - dy), (1, dy)] {
        for (ox, wx) in [(0i64, 1.0 - dx), (1, dx)] {
            let yy = y0 as i64 + oy;
            let xx = x0 as i64 + ox;
            if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                acc += wy * wx * img[[yy as usize, xx as usize, ch]];
            }
        }
    }
    acc
}

/// Forward chain is shear, aspect, scale, rotation, translation about the
/// image center; here each step is inverted in reverse order per pixel.
pub fn warp(img: &Array3<f64>, p: &WarpParams) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (cos, sin) = (QC[p.rot_quarters % 4], QS[p.rot_quarters % 4]);
    let sqrt_a = p.aspect.sqrt();
    let tan_sh = p.shear_deg.to_radians().tan();
    let mut out = Array3::zeros((h, w, c));
    for r in 0..h {
        for col in 0..w {
            let x1 = col as f64 - cx - p.translate_x * w as f64;
            let y1 = r as f64 - cy - p.translate_y * h as f64;
            // rotation inverse: R(-theta) with y pointing down
            let x2 = cos * x1 - sin * y1;
            let y2 = sin * x1 + cos * y1;
            let x3 = x2 / p.scale;
            let y3 = y2 / p.scale;
            let x4 = x3 / sqrt_a;
            let y4 = y3 * sqrt_a;
            let x5 = x4 - tan_sh * y4;
            let y5 = y4;
            let sx = x5 + cx;
            let sy = y5 + cy;
            for ch in 0..c {
                out[[r, col, ch]] = sample(img, sy, sx, ch);
            }
        }
    }
    out
}
