//! The dual-pass step and the training loop.

use rand::Rng;
use rand_distr::StandardNormal;

use super::loss::{diffusion_loss, LossContext, LossTargets, Supervision};
use super::optim::{ema_update, optimizer_step, OptimizerConfig, OptimizerState};
use crate::data::{BatchIter, BatchState, Dataset};
use crate::error::{Error, Result};
use crate::masking::{sample_mask, sample_mask_ratio, MaskSpec};
use crate::network::{init_params, Architecture, Batch, ForwardMode, InitScheme, Mdt, ModelConfig};
use crate::numerics::{Graph, ParameterTree, RngState, Scalar, SeededRng, Stream, Tensor};
use crate::schedules::{q_sample, NoiseSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    pub ema_decay: f64,
    pub label_dropout: f64,
    /// Weight of the bound term; only used when the model learns variances.
    pub vlb_lambda: f64,
    /// `f64::INFINITY` turns Min-SNR weighting off.
    pub min_snr_gamma: f64,
    /// Per-sample mask ratio is drawn uniformly from this range.
    pub mask_ratio: (f64, f64),
    pub supervision: Supervision,
    /// Global-norm cap on gradients; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub ckpt_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 64,
            optimizer: OptimizerConfig::adamw(1e-4),
            ema_decay: 0.9999,
            label_dropout: 0.1,
            vlb_lambda: 1e-3,
            min_snr_gamma: f64::INFINITY,
            mask_ratio: (0.3, 0.3),
            supervision: Supervision::AllTokens,
            grad_clip: None,
            seed: 0,
            ckpt_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema decay {} outside [0, 1)", self.ema_decay)));
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(Error::Config("label dropout outside [0, 1]".into()));
        }
        if !(self.min_snr_gamma > 0.0) || !(self.vlb_lambda >= 0.0) {
            return Err(Error::Config("min-snr gamma must be > 0 and vlb lambda >= 0".into()));
        }
        let (lo, hi) = self.mask_ratio;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!("mask ratio range [{lo}, {hi}] invalid")));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }
}

/// Per-purpose random streams of a run.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub timestep: SeededRng,
    pub noise: SeededRng,
    pub mask: SeededRng,
    pub dropout: SeededRng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            timestep: SeededRng::new(seed, Stream::Timestep),
            noise: SeededRng::new(seed, Stream::Noise),
            mask: SeededRng::new(seed, Stream::Mask),
            dropout: SeededRng::new(seed, Stream::Dropout),
        }
    }

    pub fn states(&self) -> [RngState; 4] {
        [
            self.timestep.state(),
            self.noise.state(),
            self.mask.state(),
            self.dropout.state(),
        ]
    }

    pub fn from_states(s: [RngState; 4]) -> Self {
        Self {
            timestep: SeededRng::from_state(s[0]),
            noise: SeededRng::from_state(s[1]),
            mask: SeededRng::from_state(s[2]),
            dropout: SeededRng::from_state(s[3]),
        }
    }
}

/// Everything a run needs to continue bit-identically.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub params: ParameterTree<f32>,
    pub optimizer: OptimizerState<f32>,
    pub ema: ParameterTree<f32>,
    pub rngs: TrainRngs,
    pub batches: BatchState,
}

/// The random draws of one step, shared by both passes.
#[derive(Debug, Clone)]
pub struct StepDraws<T> {
    /// `[B, c·h·w]` clean latents.
    pub x0: Tensor<T>,
    /// Labels after dropout to the null class.
    pub labels: Vec<usize>,
    pub t: Vec<usize>,
    pub eps: Tensor<T>,
    /// One mask per sample; empty for the plain stack.
    pub masks: Vec<MaskSpec>,
}

/// Draw timesteps, noise, dropped labels and masks for a batch.
pub fn draw_step<T: Scalar>(
    model: &Mdt,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    x0: Tensor<T>,
    labels: &[usize],
    rngs: &mut TrainRngs,
) -> Result<StepDraws<T>> {
    let b = x0.rows();
    let t: Vec<usize> = (0..b).map(|_| rngs.timestep.random_range(1..=sched.len())).collect();
    let eps_vals: Vec<f64> = (0..x0.numel()).map(|_| rngs.noise.sample(StandardNormal)).collect();
    let eps = Tensor::from_f64(x0.shape(), &eps_vals)?;
    let null = model.null_label();
    let labels = labels
        .iter()
        .map(|&l| {
            if rngs.dropout.random::<f64>() < cfg.label_dropout {
                null
            } else {
                l
            }
        })
        .collect();
    let masks = match model.config().architecture {
        Architecture::Plain => Vec::new(),
        Architecture::Asymmetric => {
            let n = model.geometry().tokens();
            let (lo, hi) = cfg.mask_ratio;
            (0..b)
                .map(|_| {
                    let rho = sample_mask_ratio(lo, hi, &mut rngs.mask)?;
                    sample_mask(n, rho, cfg.seed, &mut rngs.mask)
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(StepDraws { x0, labels, t, eps, masks })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub full: f64,
    /// Absent for the plain stack.
    pub masked: Option<f64>,
    pub total: f64,
}

/// Records both passes on `g` and returns their losses as graph values.
pub fn dual_pass_loss<T: Scalar>(
    model: &Mdt,
    g: &mut Graph<T>,
    pv: &crate::numerics::ParamVars,
    draws: &StepDraws<T>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(crate::numerics::Var, crate::numerics::Var, Option<crate::numerics::Var>)> {
    let b = draws.x0.rows();
    let mut x_t = Vec::with_capacity(draws.x0.numel());
    for (r, &t) in draws.t.iter().enumerate() {
        let x0r = Tensor::new(vec![draws.x0.cols()], draws.x0.row(r).to_vec())?;
        let er = Tensor::new(vec![draws.x0.cols()], draws.eps.row(r).to_vec())?;
        x_t.extend(q_sample(&x0r, t, &er, sched)?.into_data());
    }
    let x_t = Tensor::new(draws.x0.shape().to_vec(), x_t)?;
    let targets = LossTargets {
        x0: model.tokens_of(&draws.x0)?,
        x_t: model.tokens_of(&x_t)?,
        eps: model.tokens_of(&draws.eps)?,
    };
    let tf: Vec<f64> = draws.t.iter().map(|&t| t as f64).collect();
    let batch = Batch {
        x_t: &x_t,
        t: &tf,
        labels: &draws.labels,
    };
    let ctx = LossContext {
        sched,
        t: &draws.t,
        min_snr_gamma: cfg.min_snr_gamma,
        vlb_lambda: cfg.vlb_lambda,
        tokens_per_sample: model.geometry().tokens(),
    };
    let check = |g: &Graph<T>, loss: crate::numerics::Var, eps: crate::numerics::Var, mode: &str| {
        let v = g.value(loss).data()[0];
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!(
                "{mode} loss is {v:?} at t = {:?}; max |eps output| = {:?}",
                draws.t,
                g.value(eps).max_abs()
            )))
        }
    };
    let full_out = model.forward(g, pv, batch, ForwardMode::TrainFull, None)?;
    let full = diffusion_loss(g, &full_out, &targets, &ctx, None)?;
    check(g, full.total, full_out.eps, "train-full")?;
    let masked = match model.config().architecture {
        Architecture::Plain => None,
        Architecture::Asymmetric => {
            if draws.masks.len() != b {
                return Err(Error::Contract("masked pass needs one mask per sample".into()));
            }
            let out = model.forward(g, pv, batch, ForwardMode::TrainMasked, Some(&draws.masks))?;
            let select = (cfg.supervision == Supervision::MaskedOnly).then_some(draws.masks.as_slice());
            let l = diffusion_loss(g, &out, &targets, &ctx, select)?;
            check(g, l.total, out.eps, "train-masked")?;
            Some(l.total)
        }
    };
    let total = match masked {
        Some(m) => g.add(full.total, m)?,
        None => full.total,
    };
    Ok((total, full.total, masked))
}

/// Losses and parameter gradients of the summed dual-pass objective.
pub fn dual_pass_grads<T: Scalar>(
    model: &Mdt,
    params: &ParameterTree<T>,
    draws: &StepDraws<T>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ParameterTree<T>)> {
    let mut g = Graph::new();
    let pv = params.register(&mut g);
    let (total, full, masked) = dual_pass_loss(model, &mut g, &pv, draws, sched, cfg)?;
    let grads = g.backward(total)?;
    let tree = ParameterTree::from_map(g.param_grads(&grads));
    let val = |v| g.value(v).data()[0].as_f64();
    Ok((
        LossBreakdown {
            full: val(full),
            masked: masked.map(val),
            total: val(total),
        },
        tree,
    ))
}

/// One logged row of the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_full: f64,
    pub loss_masked: f64,
    pub loss_total: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,loss_full,loss_masked,loss_total,grad_norm,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:e}",
            self.step, self.loss_full, self.loss_masked, self.loss_total, self.grad_norm, self.lr
        )
    }
}

pub struct Trainer {
    model: Mdt,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    step: u64,
    params: ParameterTree<f32>,
    optimizer: OptimizerState<f32>,
    ema: ParameterTree<f32>,
    rngs: TrainRngs,
    batches: BatchIter,
}

impl Trainer {
    /// Fresh run: standard initialization from `cfg.seed`, EMA = params.
    pub fn new(model_cfg: ModelConfig, sched: NoiseSchedule, cfg: TrainConfig, dataset_len: usize) -> Result<Self> {
        cfg.validate()?;
        let model = Mdt::new(model_cfg)?;
        let params = init_params::<f32>(model.config(), InitScheme::Standard, cfg.seed)?;
        let optimizer = OptimizerState::new(cfg.optimizer.kind, &params);
        let batches = BatchIter::new(dataset_len, cfg.batch, SeededRng::new(cfg.seed, Stream::Data))?;
        Ok(Self {
            model,
            sched,
            ema: params.clone(),
            params,
            optimizer,
            rngs: TrainRngs::new(cfg.seed),
            batches,
            step: 0,
            cfg,
        })
    }

    pub fn from_state(model_cfg: ModelConfig, sched: NoiseSchedule, cfg: TrainConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        let model = Mdt::new(model_cfg)?;
        let shapes = crate::network::param_shapes(model.config())?;
        for tree in [&state.params, &state.ema] {
            if tree.len() != shapes.len() || tree.iter().any(|(k, v)| shapes.get(k).map(|s| s.as_slice()) != Some(v.shape())) {
                return Err(Error::Integrity("checkpoint parameters do not match the model config".into()));
            }
        }
        if state.optimizer.kind != cfg.optimizer.kind {
            return Err(Error::Integrity("checkpoint optimizer differs from the config".into()));
        }
        Ok(Self {
            model,
            sched,
            cfg,
            step: state.step,
            params: state.params,
            optimizer: state.optimizer,
            ema: state.ema,
            rngs: state.rngs,
            batches: BatchIter::from_state(state.batches),
        })
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            step: self.step,
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            ema: self.ema.clone(),
            rngs: self.rngs.clone(),
            batches: self.batches.state(),
        }
    }

    pub fn model(&self) -> &Mdt {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &ParameterTree<f32> {
        &self.params
    }

    pub fn ema(&self) -> &ParameterTree<f32> {
        &self.ema
    }

    /// Next batch, both passes, one optimizer update, one EMA update.
    pub fn step(&mut self, data: &Dataset) -> Result<StepMetrics> {
        let idx = self.batches.next_indices();
        let (x0, labels) = data.gather(&idx)?;
        let draws = draw_step(&self.model, &self.sched, &self.cfg, x0, &labels, &mut self.rngs)?;
        let (losses, mut grads) = dual_pass_grads(&self.model, &self.params, &draws, &self.sched, &self.cfg)?;
        let grad_norm = grads.global_norm();
        if !grad_norm.is_finite() {
            let bad = grads
                .iter()
                .find(|(_, g)| !g.all_finite())
                .map(|(k, _)| k.clone())
                .unwrap_or_default();
            return Err(Error::NonFinite(format!(
                "non-finite gradient at step {} (first in {bad})",
                self.step + 1
            )));
        }
        if let Some(cap) = self.cfg.grad_clip {
            if grad_norm > cap {
                let s = (cap / grad_norm) as f32;
                for (_, g) in grads.iter_mut() {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        optimizer_step(&mut self.params, &grads, &mut self.optimizer, &self.cfg.optimizer)?;
        ema_update(&mut self.ema, &self.params, self.cfg.ema_decay)?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            loss_full: losses.full,
            loss_masked: losses.masked.unwrap_or(0.0),
            loss_total: losses.total,
            grad_norm,
            lr: self.cfg.optimizer.lr,
        })
    }
}

/// Runs steps until `trainer` has taken `until` steps, calling `on_step`
/// after each one.
pub fn train_loop(
    trainer: &mut Trainer,
    data: &Dataset,
    until: u64,
    mut on_step: impl FnMut(&StepMetrics, &Trainer) -> Result<()>,
) -> Result<()> {
    while trainer.step_count() < until {
        let m = trainer.step(data)?;
        on_step(&m, trainer)?;
    }
    Ok(())
}
