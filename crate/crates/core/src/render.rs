//! Binary PPM (P6) grids of samples.
//!
//! Channel `k < 3` of a sample drives colour `k`; a single channel is shown
//! as gray and missing colours of two-channel samples stay 0. Values map
//! affinely from `[lo, hi]` to `[0, 255]` with round-half-up and clamping.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// `round_half_up((v − lo)/(hi − lo)·255)` clamped to `0..=255`.
pub fn to_byte(v: f64, lo: f64, hi: f64) -> u8 {
    let x = ((v - lo) / (hi - lo) * 255.0 + 0.5).floor();
    if x.is_nan() {
        0
    } else {
        x.clamp(0.0, 255.0) as u8
    }
}

/// Side of the square grid holding `n` cells.
pub fn grid_side(n: usize) -> usize {
    let mut g = (n as f64).sqrt() as usize;
    while g * g < n {
        g += 1;
    }
    while g > 0 && (g - 1) * (g - 1) >= n {
        g -= 1;
    }
    g
}

/// Renders `[n, c·h·w]` samples into a `grid_side(n)`-square P6 image.
pub fn render_ppm<T: Scalar>(samples: &Tensor<T>, chw: [usize; 3], range: (f64, f64)) -> Result<Vec<u8>> {
    let [c, h, w] = chw;
    let (lo, hi) = range;
    if !(hi > lo) {
        return Err(Error::Config(format!("render range [{lo}, {hi}] is empty")));
    }
    let n = samples.rows();
    if samples.shape().len() != 2 || samples.cols() != c * h * w || n == 0 || c == 0 {
        return Err(Error::shape2("render_ppm", samples.shape(), &[n.max(1), c * h * w]));
    }
    let g = grid_side(n);
    let (width, height) = (g * w, g * h);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    let header = out.len();
    out.resize(header + width * height * 3, 0);
    for i in 0..n {
        let (gy, gx) = (i / g, i % g);
        let s = samples.row(i);
        for r in 0..h {
            for col in 0..w {
                let px = header + ((gy * h + r) * width + gx * w + col) * 3;
                for k in 0..3 {
                    let ch = if c == 1 { Some(0) } else if k < c { Some(k) } else { None };
                    if let Some(ch) = ch {
                        out[px + k] = to_byte(s[ch * h * w + r * w + col].to_f64().unwrap(), lo, hi);
                    }
                }
            }
        }
    }
    Ok(out)
}
