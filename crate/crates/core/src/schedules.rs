//! Noise schedules, forward noising, reverse-step coefficients, Min-SNR loss
//! weights, timestep respacing, and the power-cosine guidance schedule.
//!
//! Timesteps are 1-indexed: `t = 1..=T`, with `t = 0` standing for the clean
//! sample. All tables are kept in 64-bit regardless of model precision.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Variance schedule with its derived tables.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// Original diffusion timestep for each entry (identity unless respaced).
    timesteps: Vec<usize>,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_variance: Vec<f64>,
    snr: Vec<f64>,
}

/// Ancestral-step coefficients: `μ = x_coeff·x_t − eps_coeff·ε̂`, noise
/// variance `variance`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoeffs {
    pub x_coeff: f64,
    pub eps_coeff: f64,
    pub variance: f64,
}

impl NoiseSchedule {
    /// Linear β from `beta_min` to `beta_max`, both endpoints included.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "invalid beta range [{beta_min}, {beta_max}]; need 0 < min <= max < 1"
            )));
        }
        if steps == 1 && beta_min != beta_max {
            return Err(Error::Config("a single-step schedule needs beta_min == beta_max".into()));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else if i == steps - 1 {
                    beta_max
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self::from_tables((1..=steps).collect(), betas, alpha_bars))
    }

    /// The default training schedule: 1000 steps, β from 1e-4 to 2e-2.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("valid defaults")
    }

    fn from_tables(timesteps: Vec<usize>, betas: Vec<f64>, alpha_bars: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let posterior_variance = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])
            })
            .collect();
        let snr = alpha_bars.iter().map(|a| a / (1.0 - a)).collect();
        Self {
            timesteps,
            betas,
            alphas,
            alpha_bars,
            posterior_variance,
            snr,
        }
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            return Err(Error::Range(format!("timestep {t} outside [1, {}]", self.len())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.idx(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.idx(t)?])
    }

    /// ᾱ_{t−1}, with ᾱ_0 = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> Result<f64> {
        let i = self.idx(t)?;
        Ok(if i == 0 { 1.0 } else { self.alpha_bars[i - 1] })
    }

    pub fn snr(&self, t: usize) -> Result<f64> {
        Ok(self.snr[self.idx(t)?])
    }

    /// β̃_t; zero at t = 1.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        Ok(self.posterior_variance[self.idx(t)?])
    }

    /// log β̃_t with the t = 1 entry replaced by β̃_2 (β̃_1 = 0).
    pub fn posterior_log_variance_clipped(&self, t: usize) -> Result<f64> {
        let i = self.idx(t)?;
        let v = if i == 0 && self.len() > 1 {
            self.posterior_variance[1]
        } else {
            self.posterior_variance[i]
        };
        Ok(v.max(1e-20).ln())
    }

    /// Coefficients of x₀ and x_t in the true posterior mean μ̃(x_t, x₀).
    pub fn posterior_mean_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        let i = self.idx(t)?;
        let prev = self.alpha_bar_prev(t)?;
        let denom = 1.0 - self.alpha_bars[i];
        Ok((
            self.betas[i] * prev.sqrt() / denom,
            (1.0 - prev) * self.alphas[i].sqrt() / denom,
        ))
    }

    /// Original diffusion timestep fed to the model for entry `t`.
    pub fn model_timestep(&self, t: usize) -> Result<usize> {
        Ok(self.timesteps[self.idx(t)?])
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_variances(&self) -> &[f64] {
        &self.posterior_variance
    }

    pub fn snrs(&self) -> &[f64] {
        &self.snr
    }

    /// Coefficients for one ancestral reverse step.
    pub fn posterior_step_coeffs(&self, t: usize) -> Result<PosteriorCoeffs> {
        let i = self.idx(t)?;
        let sqrt_alpha = self.alphas[i].sqrt();
        Ok(PosteriorCoeffs {
            x_coeff: 1.0 / sqrt_alpha,
            eps_coeff: self.betas[i] / ((1.0 - self.alpha_bars[i]).sqrt() * sqrt_alpha),
            variance: if i == 0 { 0.0 } else { self.posterior_variance[i] },
        })
    }

    /// Schedule restricted to the given increasing original timesteps, with
    /// β rebuilt so that the kept ᾱ values are preserved. Adjacent kept steps
    /// reuse the original β, so keeping every step reproduces the tables.
    pub fn respaced(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::Config("respacing keeps no timesteps".into()));
        }
        let mut betas = Vec::with_capacity(keep.len());
        let mut alpha_bars = Vec::with_capacity(keep.len());
        let mut prev_t = 0usize;
        for &t in keep {
            if t <= prev_t {
                return Err(Error::Config(format!("respaced timesteps not increasing at {t}")));
            }
            let i = self.idx(t)?;
            let beta = if t == prev_t + 1 {
                self.betas[i]
            } else {
                let prev = if prev_t == 0 { 1.0 } else { self.alpha_bars[prev_t - 1] };
                1.0 - self.alpha_bars[i] / prev
            };
            betas.push(beta);
            alpha_bars.push(self.alpha_bars[i]);
            prev_t = t;
        }
        let timesteps = keep.iter().map(|&t| self.timesteps[t - 1]).collect();
        Ok(Self::from_tables(timesteps, betas, alpha_bars))
    }
}

/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.
pub fn q_sample<T: Scalar>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape2("q_sample", x0.shape(), eps.shape()));
    }
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (T::from_f64_lossy(ab.sqrt()), T::from_f64_lossy((1.0 - ab).sqrt()));
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Min-SNR loss weight for ε-prediction: `min(snr_t, γ) / snr_t`.
pub fn min_snr_weight(t: usize, gamma: f64, sched: &NoiseSchedule) -> Result<f64> {
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::Config(format!("min-snr gamma must be > 0, got {gamma}")));
    }
    let snr = sched.snr(t)?;
    Ok(snr.min(gamma) / snr)
}

/// Evenly strided subsequence of `1..=T` with `n_steps` entries; the last
/// original step is always kept. Entry `j` (1-based) is `⌈j·T/n⌉`.
pub fn respace(total: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > total {
        return Err(Error::Config(format!("cannot respace {total} steps into {n_steps}")));
    }
    Ok((1..=n_steps).map(|j| (j * total).div_ceil(n_steps)).collect())
}

/// Power-cosine ramp of the guidance scale over sampling progress.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceSchedule {
    pub w_max: f64,
    pub power: f64,
    pub t_max: usize,
}

impl GuidanceSchedule {
    pub fn new(w_max: f64, power: f64, t_max: usize) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("guidance schedule needs t_max >= 1".into()));
        }
        if !(power > 0.0) {
            return Err(Error::Config(format!("guidance power must be > 0, got {power}")));
        }
        Ok(Self { w_max, power, t_max })
    }

    /// `w_i = (1 − cos(π·(i/t_max)^s)) / 2 · w_max`, where `i` counts completed
    /// sampling progress (0 at pure noise).
    pub fn scale_at(&self, i: usize) -> Result<f64> {
        if i > self.t_max {
            return Err(Error::Range(format!("progress index {i} > t_max {}", self.t_max)));
        }
        if i == self.t_max {
            return Ok(self.w_max);
        }
        let frac = (i as f64 / self.t_max as f64).powf(self.power);
        Ok((1.0 - (std::f64::consts::PI * frac).cos()) / 2.0 * self.w_max)
    }
}

pub fn guidance_scale_at(i: usize, gs: &GuidanceSchedule) -> Result<f64> {
    gs.scale_at(i)
}
