//! Ancestral DDPM sampling over a respaced schedule, with optional
//! classifier-free guidance at a fixed or power-cosine scale.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::network::Mdt;
use crate::numerics::{ParameterTree, Scalar, SeededRng, Stream, Tensor};
use crate::schedules::{respace, GuidanceSchedule, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMode {
    Off,
    Fixed,
    PowerCosine,
}

impl FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "fixed" => Ok(Self::Fixed),
            "power-cosine" => Ok(Self::PowerCosine),
            _ => Err(Error::Config(format!(
                "unknown guidance mode {s:?}; expected off, fixed or power-cosine"
            ))),
        }
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Off => "off",
            Self::Fixed => "fixed",
            Self::PowerCosine => "power-cosine",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub guidance: GuidanceMode,
    pub w: f64,
    pub s: f64,
    /// One class label per sample.
    pub labels: Vec<usize>,
    pub seed: u64,
    pub use_ema: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 250,
            guidance: GuidanceMode::PowerCosine,
            w: 3.8,
            s: 4.0,
            labels: Vec::new(),
            seed: 0,
            use_ema: true,
        }
    }
}

impl SamplerConfig {
    /// Picks the tree the sampler should read.
    pub fn select<'a, T>(&self, params: &'a ParameterTree<T>, ema: &'a ParameterTree<T>) -> &'a ParameterTree<T> {
        if self.use_ema {
            ema
        } else {
            params
        }
    }
}

/// Anything that predicts ε (and optionally variance logits) for a batch of
/// flattened latents at original diffusion timesteps.
pub trait Denoiser<T: Scalar> {
    fn latent_numel(&self) -> usize;
    fn null_label(&self) -> usize;
    fn predict(&self, x_t: &Tensor<T>, t: &[f64], labels: &[usize]) -> Result<(Tensor<T>, Option<Tensor<T>>)>;
}

/// The network evaluated in inference mode with a fixed parameter tree.
pub struct ModelDenoiser<'a, T> {
    pub model: &'a Mdt,
    pub params: &'a ParameterTree<T>,
}

impl<T: Scalar> Denoiser<T> for ModelDenoiser<'_, T> {
    fn latent_numel(&self) -> usize {
        self.model.geometry().latent_numel()
    }

    fn null_label(&self) -> usize {
        self.model.null_label()
    }

    fn predict(&self, x_t: &Tensor<T>, t: &[f64], labels: &[usize]) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        self.model.predict(self.params, x_t, t, labels)
    }
}

/// Exact ε for an axis-aligned Gaussian data distribution `N(mean, diag(var))`:
/// `ε* = √(1−ᾱ)·(x − √ᾱ·μ) / (ᾱ·σ² + 1 − ᾱ)`. Labels are ignored.
#[derive(Debug, Clone)]
pub struct GaussianScore {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub sched: NoiseSchedule,
}

impl<T: Scalar> Denoiser<T> for GaussianScore {
    fn latent_numel(&self) -> usize {
        self.mean.len()
    }

    fn null_label(&self) -> usize {
        0
    }

    fn predict(&self, x_t: &Tensor<T>, t: &[f64], _labels: &[usize]) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let d = self.mean.len();
        let mut out = Vec::with_capacity(x_t.numel());
        for (r, &tf) in t.iter().enumerate() {
            let ab = self.sched.alpha_bar(tf as usize)?;
            for (i, &x) in x_t.row(r).iter().enumerate().take(d) {
                let x = x.to_f64().unwrap();
                let e = (1.0 - ab).sqrt() * (x - ab.sqrt() * self.mean[i]) / (ab * self.var[i] + 1.0 - ab);
                out.push(T::from_f64_lossy(e));
            }
        }
        Ok((Tensor::new(x_t.shape().to_vec(), out)?, None))
    }
}

/// `ε̂ = w·ε_c + (1−w)·ε_u`, algebraically `ε_u + w(ε_c − ε_u)`; this form is
/// exact at `w = 0` and `w = 1`.
pub fn cfg_combine<T: Scalar>(eps_cond: &Tensor<T>, eps_uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::shape2("cfg_combine", eps_cond.shape(), eps_uncond.shape()));
    }
    let (wc, wu) = (T::from_f64_lossy(w), T::from_f64_lossy(1.0 - w));
    let data = eps_cond
        .data()
        .iter()
        .zip(eps_uncond.data())
        .map(|(&c, &u)| wc * c + wu * u)
        .collect();
    Tensor::new(eps_cond.shape().to_vec(), data)
}

/// Guidance progress for the `step_position`-th sampling step (0 = noisiest)
/// as `(i, t_max)`. The last of `n_steps` steps maps to `i = t_max`.
pub fn progress_index(step_position: usize, n_steps: usize) -> Result<(usize, usize)> {
    if step_position >= n_steps {
        return Err(Error::Range(format!("step position {step_position} >= {n_steps} steps")));
    }
    Ok((step_position, (n_steps - 1).max(1)))
}

/// Guidance weight applied at a step, `None` when guidance is off.
pub fn guidance_weight(cfg: &SamplerConfig, step_position: usize) -> Result<Option<f64>> {
    match cfg.guidance {
        GuidanceMode::Off => Ok(None),
        GuidanceMode::Fixed => Ok(Some(cfg.w)),
        GuidanceMode::PowerCosine => {
            let (i, t_max) = progress_index(step_position, cfg.n_steps)?;
            Ok(Some(GuidanceSchedule::new(cfg.w, cfg.s, t_max)?.scale_at(i)?))
        }
    }
}

/// Runs the reverse chain for `cfg.labels.len()` samples and returns
/// `[n, numel]` latents.
pub fn ddpm_sample<T: Scalar, D: Denoiser<T>>(
    denoiser: &D,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let n = cfg.labels.len();
    if n == 0 {
        return Err(Error::Config("sampler needs at least one label".into()));
    }
    let rs = sched.respaced(&respace(sched.len(), cfg.n_steps)?)?;
    let numel = denoiser.latent_numel();
    let mut rng = SeededRng::new(cfg.seed, Stream::Sampling);
    let mut normal = |len: usize| -> Vec<T> {
        (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::from_f64_lossy(z)
            })
            .collect()
    };
    let mut x = Tensor::new(vec![n, numel], normal(n * numel))?;
    let null = vec![denoiser.null_label(); n];

    for pos in 0..cfg.n_steps {
        let k = cfg.n_steps - pos;
        let t_model = rs.model_timestep(k)? as f64;
        let tv = vec![t_model; n];
        let (cond, var_logits) = denoiser.predict(&x, &tv, &cfg.labels)?;
        let eps = match guidance_weight(cfg, pos)? {
            None => cond,
            Some(w) => {
                let (uncond, _) = denoiser.predict(&x, &tv, &null)?;
                cfg_combine(&cond, &uncond, w)?
            }
        };
        let c = rs.posterior_step_coeffs(k)?;
        let (xc, ec) = (T::from_f64_lossy(c.x_coeff), T::from_f64_lossy(c.eps_coeff));
        let mut next: Vec<T> = x.data().iter().zip(eps.data()).map(|(&xv, &e)| xc * xv - ec * e).collect();
        if k > 1 {
            let z = normal(n * numel);
            match &var_logits {
                None => {
                    let sd = T::from_f64_lossy(c.variance.sqrt());
                    for (v, zi) in next.iter_mut().zip(z) {
                        *v = *v + sd * zi;
                    }
                }
                Some(vl) => {
                    // interpolate log-variance between β̃_t and β_t
                    let min_log = rs.posterior_log_variance_clipped(k)?;
                    let max_log = rs.beta(k)?.ln();
                    for ((v, zi), &l) in next.iter_mut().zip(z).zip(vl.data()) {
                        let frac = (l.to_f64().unwrap() + 1.0) / 2.0;
                        let sd = (0.5 * (frac * max_log + (1.0 - frac) * min_log)).exp();
                        *v = *v + T::from_f64_lossy(sd) * zi;
                    }
                }
            }
        }
        x = Tensor::new(vec![n, numel], next)?;
        if !x.all_finite() {
            return Err(Error::NonFinite(format!(
                "sampling state at step {pos} (diffusion t = {t_model})"
            )));
        }
    }
    Ok(x)
}
