//! Class-conditional grids of mirror-symmetric blob pairs whose two members
//! always share one amplitude.

use rand::Rng;
use rand_distr::Normal;

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Stream, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub size: usize,
    pub pairs_per_class: usize,
    pub blob_sigma: f64,
    pub noise_std: f64,
    pub amplitude: (f64, f64),
}

impl SyntheticSpec {
    /// Square `side × side` grids with two pairs per class.
    pub fn new(classes: usize, channels: usize, side: usize, size: usize) -> Self {
        Self {
            classes,
            channels,
            height: side,
            width: side,
            size,
            pairs_per_class: 2,
            blob_sigma: 0.6,
            noise_std: 0.05,
            amplitude: (0.25, 2.25),
        }
    }
}

/// One mirror pair: blobs at `(row, left)` and `(row, right)` of `channel`,
/// with `right = w − 1 − left`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSlot {
    pub channel: usize,
    pub row: usize,
    pub left: usize,
    pub right: usize,
}

impl PairSlot {
    pub fn centres(&self) -> [(usize, usize); 2] {
        [(self.row, self.left), (self.row, self.right)]
    }
}

fn chebyshev(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

/// Pair positions for `class`. Rows sit in a class-specific band; pair `j`
/// moves one stride `s = h/8` down and `2s` outward.
pub fn pair_slots(spec: &SyntheticSpec, class: usize) -> Result<Vec<PairSlot>> {
    let (h, w) = (spec.height, spec.width);
    if spec.channels == 0 || spec.classes == 0 || spec.pairs_per_class == 0 {
        return Err(Error::Config("synthetic data needs channels, classes and pairs".into()));
    }
    if h < 8 || h % 8 != 0 || w < 8 || w % 2 != 0 {
        return Err(Error::Config(format!("synthetic grid {h}x{w} too small for the blob layout")));
    }
    if class >= spec.classes {
        return Err(Error::Range(format!("class {class} outside {}", spec.classes)));
    }
    let s = (h / 8) as isize;
    let k = spec.pairs_per_class as isize;
    let base = ((2 * class + 1) * h / (2 * spec.classes)) as isize;
    let mut slots = Vec::with_capacity(spec.pairs_per_class);
    for j in 0..k {
        let row = base - (k / 2) * s + j * s;
        let left = (w / 2) as isize - 2 - 2 * j * s;
        if row < 0 || row >= h as isize || left < 0 {
            return Err(Error::Config(format!(
                "synthetic grid {h}x{w} too small for {} pairs of {} classes",
                spec.pairs_per_class, spec.classes
            )));
        }
        let (row, left) = (row as usize, left as usize);
        slots.push(PairSlot {
            channel: j as usize % spec.channels,
            row,
            left,
            right: w - 1 - left,
        });
    }
    // 3×3 footprints of blobs sharing a channel must not touch
    for (a, sa) in slots.iter().enumerate() {
        if chebyshev(sa.centres()[0], sa.centres()[1]) < 3 {
            return Err(Error::Config("pair members overlap; grid too small".into()));
        }
        for sb in &slots[a + 1..] {
            if sa.channel != sb.channel {
                continue;
            }
            for ca in sa.centres() {
                for cb in sb.centres() {
                    if chebyshev(ca, cb) < 3 {
                        return Err(Error::Config(format!(
                            "blob footprints overlap on channel {} for a {h}x{w} grid with {} channels",
                            sa.channel, spec.channels
                        )));
                    }
                }
            }
        }
    }
    Ok(slots)
}

/// Raw (unnormalized) samples; labels cycle through the classes.
pub fn gen_synthetic_pairs(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.size == 0 {
        return Err(Error::Config("synthetic dataset size must be positive".into()));
    }
    let (lo, hi) = spec.amplitude;
    if !(lo < hi) || !(spec.blob_sigma > 0.0) || !(spec.noise_std >= 0.0) {
        return Err(Error::Config("invalid synthetic amplitude, sigma or noise".into()));
    }
    let tables: Vec<Vec<PairSlot>> = (0..spec.classes).map(|c| pair_slots(spec, c)).collect::<Result<_>>()?;
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let numel = c * h * w;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = SeededRng::new(seed, Stream::Data);
    let inv = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);
    let mut data = Vec::with_capacity(spec.size * numel);
    let mut labels = Vec::with_capacity(spec.size);
    let mut img = vec![0.0f64; numel];
    for i in 0..spec.size {
        let class = i % spec.classes;
        img.fill(0.0);
        for slot in &tables[class] {
            let amp = rng.random_range(lo..hi);
            for (r0, c0) in slot.centres() {
                for r in 0..h {
                    for col in 0..w {
                        let dr = r as f64 - r0 as f64;
                        let dc = col as f64 - c0 as f64;
                        img[slot.channel * h * w + r * w + col] += amp * (-(dr * dr + dc * dc) * inv).exp();
                    }
                }
            }
        }
        for v in img.iter_mut() {
            *v += rng.sample(noise);
        }
        data.extend(img.iter().map(|&v| v as f32));
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![spec.size, numel], data)?, labels, spec.classes, [c, h, w])
}
