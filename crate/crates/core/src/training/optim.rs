//! AdamW, Adan and the weight EMA.

use crate::error::{Error, Result};
use crate::numerics::{ParameterTree, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    Adan,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adamw" => Ok(Self::AdamW),
            "adan" => Ok(Self::Adan),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AdamW => "adamw",
            Self::Adan => "adan",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// AdamW uses the first two entries.
    pub betas: [f64; 3],
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adamw(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr,
            betas: [0.9, 0.999, 0.0],
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adan(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adan,
            lr,
            betas: [0.98, 0.92, 0.99],
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let used = match self.kind {
            OptimizerKind::AdamW => &self.betas[..2],
            OptimizerKind::Adan => &self.betas[..],
        };
        if used.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config(format!("optimizer betas {:?} outside [0, 1)", self.betas)));
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer lr and eps must be > 0, decay >= 0".into()));
        }
        Ok(())
    }
}

/// Per-parameter optimizer buffers. Every tree mirrors the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub step: u64,
    /// First moment of gradients.
    pub m: ParameterTree<T>,
    /// AdamW: second moment. Adan: moment of gradient differences.
    pub v: ParameterTree<T>,
    /// Adan only: second moment of `g + β2·(g − g_prev)`.
    pub n: Option<ParameterTree<T>>,
    /// Adan only: previous gradient.
    pub prev: Option<ParameterTree<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, params: &ParameterTree<T>) -> Self {
        let z = params.zeros_like();
        let adan = kind == OptimizerKind::Adan;
        Self {
            kind,
            step: 0,
            m: z.clone(),
            v: z.clone(),
            n: adan.then(|| z.clone()),
            prev: adan.then_some(z),
        }
    }

    /// Named buffers for serialization, in a fixed order.
    pub fn trees(&self) -> Vec<(&'static str, &ParameterTree<T>)> {
        let mut out = vec![("m", &self.m), ("v", &self.v)];
        if let Some(n) = &self.n {
            out.push(("n", n));
        }
        if let Some(p) = &self.prev {
            out.push(("prev", p));
        }
        out
    }
}

fn zip3<'a, T: Scalar>(
    params: &'a mut ParameterTree<T>,
    grads: &'a ParameterTree<T>,
) -> Result<impl Iterator<Item = (&'a String, &'a mut Tensor<T>, &'a Tensor<T>)>> {
    params.check_same_layout(grads)?;
    Ok(params.iter_mut().zip(grads.iter()).map(|((k, p), (_, g))| (k, p, g)))
}

/// Decoupled-decay Adam: `θ ← θ(1 − lr·λ) − lr·m̂/(√v̂ + ε)`.
pub fn adamw_step<T: Scalar>(
    params: &mut ParameterTree<T>,
    grads: &ParameterTree<T>,
    state: &mut OptimizerState<T>,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if state.kind != OptimizerKind::AdamW {
        return Err(Error::Contract("adamw_step on a non-AdamW state".into()));
    }
    state.step += 1;
    let [b1, b2, _] = cfg.betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (name, p, g) in zip3(params, grads)? {
        let m = state.m.get_mut(name).expect("layout checked");
        let v = state.v.get_mut(name).expect("layout checked");
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gf = gi.as_f64();
            let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
            *mi = T::from_f64_lossy(mf);
            *vi = T::from_f64_lossy(vf);
            let denom = (vf / bc2).sqrt() + cfg.eps;
            let upd = pi.as_f64() * decay - cfg.lr * (mf / bc1) / denom;
            *pi = T::from_f64_lossy(upd);
        }
    }
    Ok(())
}

/// Adaptive Nesterov momentum: moments of `g`, of `g − g_prev`, and of
/// `(g + β2(g − g_prev))²`, bias-corrected, with decoupled decay
/// `θ ← (θ − step)/(1 + lr·λ)`.
pub fn adan_step<T: Scalar>(
    params: &mut ParameterTree<T>,
    grads: &ParameterTree<T>,
    state: &mut OptimizerState<T>,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if state.kind != OptimizerKind::Adan {
        return Err(Error::Contract("adan_step on a non-Adan state".into()));
    }
    let first = state.step == 0;
    state.step += 1;
    let [b1, b2, b3] = cfg.betas;
    let k = state.step as i32;
    let (bc1, bc2, bc3) = (1.0 - b1.powi(k), 1.0 - b2.powi(k), 1.0 - b3.powi(k));
    // proximal decay as in the reference implementation
    let shrink = 1.0 / (1.0 + cfg.lr * cfg.weight_decay);
    let (n_tree, prev_tree) = match (&mut state.n, &mut state.prev) {
        (Some(n), Some(p)) => (n, p),
        _ => return Err(Error::Contract("Adan state lacks its buffers".into())),
    };
    for (name, p, g) in zip3(params, grads)? {
        let m = state.m.get_mut(name).expect("layout checked");
        let v = state.v.get_mut(name).expect("layout checked");
        let n = n_tree.get_mut(name).expect("layout checked");
        let prev = prev_tree.get_mut(name).expect("layout checked");
        for (i, pi) in p.data_mut().iter_mut().enumerate() {
            let gf = g.data()[i].as_f64();
            let diff = if first { 0.0 } else { gf - prev.data()[i].as_f64() };
            let upd = gf + b2 * diff;
            let mf = b1 * m.data()[i].as_f64() + (1.0 - b1) * gf;
            let vf = b2 * v.data()[i].as_f64() + (1.0 - b2) * diff;
            let nf = b3 * n.data()[i].as_f64() + (1.0 - b3) * upd * upd;
            m.data_mut()[i] = T::from_f64_lossy(mf);
            v.data_mut()[i] = T::from_f64_lossy(vf);
            n.data_mut()[i] = T::from_f64_lossy(nf);
            prev.data_mut()[i] = g.data()[i];
            let denom = (nf / bc3).sqrt() + cfg.eps;
            let step = cfg.lr * (mf / bc1 + b2 * vf / bc2) / denom;
            *pi = T::from_f64_lossy((pi.as_f64() - step) * shrink);
        }
    }
    Ok(())
}

pub fn optimizer_step<T: Scalar>(
    params: &mut ParameterTree<T>,
    grads: &ParameterTree<T>,
    state: &mut OptimizerState<T>,
    cfg: &OptimizerConfig,
) -> Result<()> {
    match cfg.kind {
        OptimizerKind::AdamW => adamw_step(params, grads, state, cfg),
        OptimizerKind::Adan => adan_step(params, grads, state, cfg),
    }
}

/// `ema ← decay·ema + (1 − decay)·params`.
pub fn ema_update<T: Scalar>(ema: &mut ParameterTree<T>, params: &ParameterTree<T>, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Config(format!("ema decay {decay} outside [0, 1)")));
    }
    ema.check_same_layout(params)?;
    for ((_, e), (_, p)) in ema.iter_mut().zip(params.iter()) {
        for (ei, &pi) in e.data_mut().iter_mut().zip(p.data()) {
            *ei = T::from_f64_lossy(decay * ei.as_f64() + (1.0 - decay) * pi.as_f64());
        }
    }
    Ok(())
}
