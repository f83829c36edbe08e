//! Min-SNR-weighted ε-MSE and the optional variational-bound term.

use std::f64::consts::{LN_2, PI};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::masking::MaskSpec;
use crate::network::ForwardOutput;
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::schedules::{min_snr_weight, NoiseSchedule};

/// Which tokens the ε-MSE of a masked pass averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Supervision {
    AllTokens,
    MaskedOnly,
}

impl std::str::FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" | "all_tokens" => Ok(Self::AllTokens),
            "masked" | "masked_only" => Ok(Self::MaskedOnly),
            other => Err(Error::Config(format!("unknown supervision {other:?}"))),
        }
    }
}

impl std::fmt::Display for Supervision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AllTokens => "all",
            Self::MaskedOnly => "masked",
        })
    }
}

/// Per-batch constants shared by both passes.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub sched: &'a NoiseSchedule,
    pub t: &'a [usize],
    /// `f64::INFINITY` disables the clamp.
    pub min_snr_gamma: f64,
    pub vlb_lambda: f64,
    pub tokens_per_sample: usize,
}

/// Token-layout tensors `[B·N, c·p²]` for one batch.
#[derive(Debug, Clone)]
pub struct LossTargets<T> {
    pub x0: Tensor<T>,
    pub x_t: Tensor<T>,
    pub eps: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct PassLoss {
    pub total: Var,
    pub mse: Var,
    pub vlb: Option<Var>,
}

/// Row weights for the MSE: Min-SNR weight of the row's sample divided by
/// the number of supervised elements.
pub fn mse_row_weights(ctx: &LossContext<'_>, cols: usize, select: Option<&[MaskSpec]>) -> Result<Vec<f64>> {
    let n = ctx.tokens_per_sample;
    let snr_w = ctx
        .t
        .iter()
        .map(|&t| {
            if ctx.min_snr_gamma.is_infinite() {
                ctx.sched.snr(t).map(|_| 1.0)
            } else {
                min_snr_weight(t, ctx.min_snr_gamma, ctx.sched)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let chosen: Vec<bool> = match select {
        Some(masks) if masks.iter().any(|m| m.masked_count() > 0) => {
            masks.iter().flat_map(|m| m.masked.iter().copied()).collect()
        }
        _ => vec![true; ctx.t.len() * n],
    };
    let count = chosen.iter().filter(|&&c| c).count() * cols;
    Ok(chosen
        .iter()
        .enumerate()
        .map(|(r, &c)| if c { snr_w[r / n] / count as f64 } else { 0.0 })
        .collect())
}

fn per_row_const<T: Scalar>(g: &mut Graph<T>, rows: &[usize], cols: usize, f: impl Fn(usize) -> f64) -> Result<Var> {
    let v: Vec<f64> = rows.iter().flat_map(|&r| std::iter::repeat_n(f(r), cols)).collect();
    Ok(g.constant(Tensor::from_f64(&[rows.len(), cols], &v)?))
}

fn gather_const<T: Scalar>(g: &mut Graph<T>, src: &Tensor<T>, rows: &[usize]) -> Result<Var> {
    let cols = src.cols();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(src.row(r));
    }
    Ok(g.constant(Tensor::new(vec![rows.len(), cols], data)?))
}

/// `Φ(x) ≈ ½(1 + tanh(√(2/π)(x + 0.044715x³)))`.
fn approx_normal_cdf<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let x2 = g.mul(x, x)?;
    let x3 = g.mul(x2, x)?;
    let x3 = g.scale(x3, T::from_f64_lossy(0.044715))?;
    let inner = g.add(x, x3)?;
    let inner = g.scale(inner, T::from_f64_lossy((2.0 / PI).sqrt()))?;
    let th = g.tanh(inner)?;
    let th = g.add_scalar(th, T::one())?;
    g.scale(th, T::from_f64_lossy(0.5))
}

/// Sum over all elements of the per-step bound in bits: Gaussian KL against
/// the true posterior for t > 1, discretized decoder NLL at t = 1. The model
/// mean uses the detached ε estimate so only the variance head learns here.
fn vlb_sum<T: Scalar>(
    g: &mut Graph<T>,
    eps_hat: &Tensor<T>,
    v: Var,
    targets: &LossTargets<T>,
    ctx: &LossContext<'_>,
) -> Result<Var> {
    let n = ctx.tokens_per_sample;
    let cols = eps_hat.cols();
    let rows_total = eps_hat.rows();
    let sched = ctx.sched;
    let row_t = |r: usize| ctx.t[r / n];
    let mut parts = Vec::new();

    // model mean from detached ε̂: μ = c0·x̂0 + c1·x_t with x̂0 = (x_t − √(1−ᾱ)ε̂)/√ᾱ
    let mut mean = Vec::with_capacity(rows_total * cols);
    for r in 0..rows_total {
        let t = row_t(r);
        let ab = sched.alpha_bar(t)?;
        let (c0, c1) = sched.posterior_mean_coeffs(t)?;
        for ((&xt, &e), _) in targets.x_t.row(r).iter().zip(eps_hat.row(r)).zip(0..cols) {
            let x0_hat = (xt.as_f64() - (1.0 - ab).sqrt() * e.as_f64()) / ab.sqrt();
            mean.push(c0 * x0_hat + c1 * xt.as_f64());
        }
    }
    let mean = Tensor::<T>::from_f64(&[rows_total, cols], &mean)?;

    let kl_rows: Vec<usize> = (0..rows_total).filter(|&r| row_t(r) > 1).collect();
    let nll_rows: Vec<usize> = (0..rows_total).filter(|&r| row_t(r) == 1).collect();
    let logvar_of = |g: &mut Graph<T>, rows: &[usize]| -> Result<Var> {
        let vr = g.gather_rows(v, Rc::new(rows.to_vec()))?;
        // frac = (v+1)/2;  logvar = frac·max + (1−frac)·min
        let half_span: Rc<Vec<T>> = Rc::new(
            rows.iter()
                .map(|&r| {
                    let t = row_t(r);
                    let hi = sched.beta(t).map(f64::ln).unwrap_or(0.0);
                    let lo = sched.posterior_log_variance_clipped(t).unwrap_or(0.0);
                    T::from_f64_lossy(0.5 * (hi - lo))
                })
                .collect(),
        );
        let scaled = g.scale_rows(vr, half_span)?;
        let mid = per_row_const(g, rows, cols, |r| {
            let t = row_t(r);
            0.5 * (sched.beta(t).map(f64::ln).unwrap_or(0.0)
                + sched.posterior_log_variance_clipped(t).unwrap_or(0.0))
        })?;
        g.add(scaled, mid)
    };

    if !kl_rows.is_empty() {
        let logvar = logvar_of(g, &kl_rows)?;
        let true_logvar = per_row_const(g, &kl_rows, cols, |r| {
            sched.posterior_log_variance_clipped(row_t(r)).unwrap_or(0.0)
        })?;
        let mut sq = Vec::with_capacity(kl_rows.len() * cols);
        for &r in &kl_rows {
            let t = row_t(r);
            let (c0, c1) = sched.posterior_mean_coeffs(t)?;
            for ((&x0, &xt), &m) in targets.x0.row(r).iter().zip(targets.x_t.row(r)).zip(mean.row(r)) {
                let mu = c0 * x0.as_f64() + c1 * xt.as_f64();
                sq.push((mu - m.as_f64()).powi(2));
            }
        }
        let sq = g.constant(Tensor::from_f64(&[kl_rows.len(), cols], &sq)?);
        // ½(−1 + logσ² − log β̃ + exp(log β̃ − logσ²) + (μ̃ − μ)² exp(−logσ²))
        let d = g.sub(true_logvar, logvar)?;
        let e1 = g.exp(d)?;
        let nl = g.neg(logvar)?;
        let inv = g.exp(nl)?;
        let e2 = g.mul(sq, inv)?;
        let a = g.sub(logvar, true_logvar)?;
        let s = g.add(a, e1)?;
        let s = g.add(s, e2)?;
        let s = g.add_scalar(s, -T::one())?;
        let kl = g.scale(s, T::from_f64_lossy(0.5 / LN_2))?;
        parts.push(g.sum(kl)?);
    }

    if !nll_rows.is_empty() {
        let logvar = logvar_of(g, &nll_rows)?;
        let x0 = gather_const(g, &targets.x0, &nll_rows)?;
        let mu = gather_const(g, &mean, &nll_rows)?;
        let centred = g.sub(x0, mu)?;
        let half = g.scale(logvar, T::from_f64_lossy(-0.5))?;
        let inv_std = g.exp(half)?;
        let bin = T::from_f64_lossy(1.0 / 255.0);
        let plus = g.add_scalar(centred, bin)?;
        let plus = g.mul(inv_std, plus)?;
        let minus = g.add_scalar(centred, -bin)?;
        let minus = g.mul(inv_std, minus)?;
        let cdf_plus = approx_normal_cdf(g, plus)?;
        let cdf_min = approx_normal_cdf(g, minus)?;
        let tiny = T::from_f64_lossy(1e-12);
        // edge bins integrate the open tails
        let mut lo_sel = Vec::new();
        let mut hi_sel = Vec::new();
        let mut mid_sel = Vec::new();
        for &r in &nll_rows {
            for &x in targets.x0.row(r) {
                let x = x.as_f64();
                let (l, h) = (x < -0.999, x > 0.999);
                lo_sel.push(if l { 1.0 } else { 0.0 });
                hi_sel.push(if h { 1.0 } else { 0.0 });
                mid_sel.push(if l || h { 0.0 } else { 1.0 });
            }
        }
        let shape = [nll_rows.len(), cols];
        let lo_sel = g.constant(Tensor::from_f64(&shape, &lo_sel)?);
        let hi_sel = g.constant(Tensor::from_f64(&shape, &hi_sel)?);
        let mid_sel = g.constant(Tensor::from_f64(&shape, &mid_sel)?);

        let lp = g.add_scalar(cdf_plus, tiny)?;
        let log_plus = g.log(lp)?;
        let one_minus = g.neg(cdf_min)?;
        let one_minus = g.add_scalar(one_minus, T::one() + tiny)?;
        let log_one_minus = g.log(one_minus)?;
        let delta = g.sub(cdf_plus, cdf_min)?;
        let delta = g.add_scalar(delta, tiny)?;
        let log_delta = g.log(delta)?;
        let a = g.mul(lo_sel, log_plus)?;
        let b = g.mul(hi_sel, log_one_minus)?;
        let c = g.mul(mid_sel, log_delta)?;
        let ab = g.add(a, b)?;
        let lp = g.add(ab, c)?;
        let nll = g.scale(lp, T::from_f64_lossy(-1.0 / LN_2))?;
        parts.push(g.sum(nll)?);
    }

    match parts.as_slice() {
        [one] => Ok(*one),
        [a, b] => g.add(*a, *b),
        _ => Err(Error::Contract("empty batch in vlb".into())),
    }
}

/// Loss of one forward pass. `select` restricts the MSE average to masked
/// tokens (masked-only supervision); the bound term always spans all tokens.
pub fn diffusion_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &ForwardOutput,
    targets: &LossTargets<T>,
    ctx: &LossContext<'_>,
    select: Option<&[MaskSpec]>,
) -> Result<PassLoss> {
    let eps_hat_val = g.value(out.eps).clone();
    if eps_hat_val.shape() != targets.eps.shape() {
        return Err(Error::shape2("diffusion_loss", eps_hat_val.shape(), targets.eps.shape()));
    }
    let cols = eps_hat_val.cols();
    let weights = mse_row_weights(ctx, cols, select)?;
    let target = g.constant(targets.eps.clone());
    let diff = g.sub(out.eps, target)?;
    let sq = g.mul(diff, diff)?;
    let weighted = g.scale_rows(sq, Rc::new(weights.iter().map(|&w| T::from_f64_lossy(w)).collect()))?;
    let mse = g.sum(weighted)?;

    let vlb = match out.var_logits {
        Some(v) if ctx.vlb_lambda > 0.0 => {
            let total = vlb_sum(g, &eps_hat_val, v, targets, ctx)?;
            let per = g.scale(total, T::from_f64_lossy(ctx.vlb_lambda / eps_hat_val.numel() as f64))?;
            Some(per)
        }
        _ => None,
    };
    let total = match vlb {
        Some(v) => g.add(mse, v)?,
        None => mse,
    };
    Ok(PassLoss { total, mse, vlb })
}
