//! Datasets: the synthetic mirror-pair generator, IDX ingestion,
//! per-channel normalization, and a restartable seeded batch iterator.

mod batches;
mod idx;
mod synthetic;

pub use batches::{BatchIter, BatchState};
pub use idx::{parse_idx, read_idx, IdxArray, IdxOptions};
pub use synthetic::{gen_synthetic_pairs, pair_slots, PairSlot, SyntheticSpec};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Samples stored one per row in `c, h, w` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn new(x: Tensor<f32>, labels: Vec<usize>, classes: usize, chw: [usize; 3]) -> Result<Self> {
        let [channels, height, width] = chw;
        if x.shape().len() != 2 || x.cols() != channels * height * width || x.rows() != labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                detail: format!("{:?} samples for {} labels of {chw:?}", x.shape(), labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Range(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self {
            x,
            labels,
            classes,
            channels,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Rows `indices` stacked into a batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let numel = self.sample_numel();
        let mut data = Vec::with_capacity(indices.len() * numel);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Range(format!("sample {i} outside a dataset of {}", self.len())));
            }
            data.extend_from_slice(self.x.row(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), numel], data)?, labels))
    }
}

/// Per-channel affine standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Per-channel mean and population std over every sample and pixel.
    pub fn fit(data: &Dataset) -> Result<Self> {
        let plane = data.height * data.width;
        let mut mean = Vec::with_capacity(data.channels);
        let mut std = Vec::with_capacity(data.channels);
        for c in 0..data.channels {
            let values = || {
                (0..data.len()).flat_map(move |r| data.x.row(r)[c * plane..(c + 1) * plane].iter().map(|&v| v as f64))
            };
            let count = (data.len() * plane) as f64;
            let m = values().sum::<f64>() / count;
            let var = values().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
            if !(var > 0.0) {
                return Err(Error::NonFinite(format!("channel {c} has zero variance")));
            }
            mean.push(m);
            std.push(var.sqrt());
        }
        Ok(Self { mean, std })
    }

    fn map(&self, data: &Dataset, f: impl Fn(f64, f64, f64) -> f64) -> Result<Dataset> {
        if self.mean.len() != data.channels {
            return Err(Error::Shape {
                op: "normalize",
                detail: format!("{} channel stats for {} channels", self.mean.len(), data.channels),
            });
        }
        let plane = data.height * data.width;
        let numel = data.sample_numel();
        let mut out = data.clone();
        for (i, v) in out.x.data_mut().iter_mut().enumerate() {
            let c = (i % numel) / plane;
            *v = f(*v as f64, self.mean[c], self.std[c]) as f32;
        }
        Ok(out)
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        self.map(data, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, data: &Dataset) -> Result<Dataset> {
        self.map(data, |v, m, s| v * s + m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_round_trip_and_moments() {
        let spec = SyntheticSpec::new(2, 2, 8, 512);
        let raw = gen_synthetic_pairs(&spec, 3).unwrap();
        let norm = Normalization::fit(&raw).unwrap();
        let z = norm.apply(&raw).unwrap();
        let back = norm.invert(&z).unwrap();
        for (a, b) in raw.x.data().iter().zip(back.x.data()) {
            assert!((a - b).abs() < 1e-6 * a.abs().max(1.0));
        }
        let refit = Normalization::fit(&z).unwrap();
        for c in 0..2 {
            assert!(refit.mean[c].abs() < 0.05);
            assert!((refit.std[c] - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let spec = SyntheticSpec::new(2, 2, 8, 4);
        let d = gen_synthetic_pairs(&spec, 0).unwrap();
        let (x, l) = d.gather(&[3, 0]).unwrap();
        assert_eq!(x.row(0), d.x.row(3));
        assert_eq!(l, vec![d.labels[3], d.labels[0]]);
        assert!(d.gather(&[4]).is_err());
    }
}
