//! Patchify/unpatchify, random token masks, kept-token extraction and the
//! masked shortcut `k = (1−M)·q + M·k̂`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Grid geometry of a patchified latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGridGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl TokenGridGeometry {
    pub fn new(channels: usize, height: usize, width: usize, patch: usize) -> Result<Self> {
        if channels == 0 || patch == 0 || height == 0 || width == 0 {
            return Err(Error::Config("latent extents and patch size must be positive".into()));
        }
        if !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(Error::Config(format!(
                "patch size {patch} does not divide latent {height}x{width}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            patch,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.patch
    }

    /// Token count `N`.
    pub fn tokens(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Raw token width `c·p²`.
    pub fn token_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn latent_numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Splits a `c×h×w` grid into `N` tokens of `c·p²` values. Token `k` is the
/// patch at grid position `(k / g_w, k % g_w)`, flattened channel-major,
/// then rows, then columns.
pub fn patchify<T: Scalar>(z: &Tensor<T>, patch: usize) -> Result<(Tensor<T>, TokenGridGeometry)> {
    let s = z.shape();
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "patchify",
            detail: format!("expected c×h×w, got {s:?}"),
        });
    }
    let geo = TokenGridGeometry::new(s[0], s[1], s[2], patch)?;
    let mut out = Vec::with_capacity(z.numel());
    patchify_into(z.data(), &geo, &mut out);
    Ok((Tensor::new(vec![geo.tokens(), geo.token_dim()], out)?, geo))
}

pub(crate) fn patchify_into<T: Scalar>(z: &[T], geo: &TokenGridGeometry, out: &mut Vec<T>) {
    let (p, h, w) = (geo.patch, geo.height, geo.width);
    for gr in 0..geo.grid_h() {
        for gc in 0..geo.grid_w() {
            for ch in 0..geo.channels {
                for r in 0..p {
                    let base = ch * h * w + (gr * p + r) * w + gc * p;
                    out.extend_from_slice(&z[base..base + p]);
                }
            }
        }
    }
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, geo: &TokenGridGeometry) -> Result<Tensor<T>> {
    if tokens.shape() != [geo.tokens(), geo.token_dim()] {
        return Err(Error::shape2("unpatchify", tokens.shape(), &[geo.tokens(), geo.token_dim()]));
    }
    let mut out = vec![T::zero(); geo.latent_numel()];
    unpatchify_into(tokens.data(), geo, &mut out);
    Tensor::new(geo.latent_shape().to_vec(), out)
}

pub(crate) fn unpatchify_into<T: Scalar>(tokens: &[T], geo: &TokenGridGeometry, out: &mut [T]) {
    let (p, h, w) = (geo.patch, geo.height, geo.width);
    let mut src = 0;
    for gr in 0..geo.grid_h() {
        for gc in 0..geo.grid_w() {
            for ch in 0..geo.channels {
                for r in 0..p {
                    let base = ch * h * w + (gr * p + r) * w + gc * p;
                    out[base..base + p].copy_from_slice(&tokens[src..src + p]);
                    src += p;
                }
            }
        }
    }
}

/// A per-sample token mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    /// `true` marks a masked (dropped) token.
    pub masked: Vec<bool>,
    pub ratio: f64,
    /// Unmasked positions in ascending order.
    pub kept: Vec<usize>,
    pub seed: u64,
}

impl MaskSpec {
    /// A mask that keeps every token.
    pub fn none(tokens: usize) -> Self {
        Self {
            masked: vec![false; tokens],
            ratio: 0.0,
            kept: (0..tokens).collect(),
            seed: 0,
        }
    }

    pub fn from_masked(masked: Vec<bool>, ratio: f64) -> Self {
        let kept = masked
            .iter()
            .enumerate()
            .filter(|(_, &m)| !m)
            .map(|(i, _)| i)
            .collect();
        Self {
            masked,
            ratio,
            kept,
            seed: 0,
        }
    }

    pub fn tokens(&self) -> usize {
        self.masked.len()
    }

    pub fn masked_count(&self) -> usize {
        self.masked.len() - self.kept.len()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        self.masked
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect()
    }

    /// `M` as 0/1 values.
    pub fn indicator<T: Scalar>(&self) -> Vec<T> {
        self.masked.iter().map(|&m| if m { T::one() } else { T::zero() }).collect()
    }
}

/// Number of masked tokens: `round_half_up(ρ·N)`.
pub fn masked_count(tokens: usize, ratio: f64) -> usize {
    (ratio * tokens as f64 + 0.5).floor() as usize
}

/// Uniformly random subset of `round_half_up(ρ·N)` tokens, masked.
pub fn sample_mask<R: Rng + ?Sized>(tokens: usize, ratio: f64, seed: u64, rng: &mut R) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let k = masked_count(tokens, ratio).min(tokens);
    let mut masked = vec![false; tokens];
    for i in rand::seq::index::sample(rng, tokens, k).into_iter() {
        masked[i] = true;
    }
    let mut spec = MaskSpec::from_masked(masked, ratio);
    spec.seed = seed;
    Ok(spec)
}

/// Uniform draw of the mask ratio from `[lo, hi]`; `lo == hi` returns `lo`.
pub fn sample_mask_ratio<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> Result<f64> {
    if !(0.0 <= lo && lo <= hi && hi < 1.0) {
        return Err(Error::Config(format!("invalid mask ratio range [{lo}, {hi}]")));
    }
    if lo == hi {
        return Ok(lo);
    }
    Ok(rng.random_range(lo..=hi))
}

/// Kept rows of `tokens`, in order.
pub fn apply_mask<T: Scalar>(tokens: &Tensor<T>, mask: &MaskSpec) -> Result<Tensor<T>> {
    if tokens.rows() != mask.tokens() {
        return Err(Error::shape2("apply_mask", tokens.shape(), &[mask.tokens()]));
    }
    let mut data = Vec::with_capacity(mask.kept.len() * tokens.cols());
    for &i in &mask.kept {
        data.extend_from_slice(tokens.row(i));
    }
    Tensor::new(vec![mask.kept.len(), tokens.cols()], data)
}

/// Scatters kept rows back to their positions and writes `fill` into every
/// masked row.
pub fn fill_masked<T: Scalar>(kept: &Tensor<T>, mask: &MaskSpec, fill: &[T]) -> Result<Tensor<T>> {
    let d = kept.cols();
    if kept.rows() != mask.kept.len() || fill.len() != d {
        return Err(Error::shape2("fill_masked", kept.shape(), &[mask.kept.len(), fill.len()]));
    }
    let mut out = Tensor::zeros(&[mask.tokens(), d]);
    for (i, &m) in mask.masked.iter().enumerate() {
        if m {
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(fill);
        }
    }
    for (src, &dst) in mask.kept.iter().enumerate() {
        out.data_mut()[dst * d..(dst + 1) * d].copy_from_slice(kept.row(src));
    }
    Ok(out)
}

/// `k = (1−M)·q + M·k̂`, selecting whole rows.
pub fn masked_shortcut<T: Scalar>(q: &Tensor<T>, k_hat: &Tensor<T>, mask: &MaskSpec) -> Result<Tensor<T>> {
    if q.shape() != k_hat.shape() || q.rows() != mask.tokens() {
        return Err(Error::shape2("masked_shortcut", q.shape(), k_hat.shape()));
    }
    let mut out = q.clone();
    let d = q.cols();
    for (i, &m) in mask.masked.iter().enumerate() {
        if m {
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(k_hat.row(i));
        }
    }
    Ok(out)
}
