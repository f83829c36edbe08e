//! Forward pass of the asymmetric network and of the plain control stack.

use std::rc::Rc;

use super::attention::relative_bias_index;
use super::config::{Architecture, ModelConfig, Variant};
use super::params::{dec_prefix, enc_prefix, encoder_skip_sources, SIDE_PREFIX};
use crate::error::{Error, Result};
use crate::masking::{patchify_into, unpatchify_into, MaskSpec, TokenGridGeometry};
use crate::numerics::{AttentionLayout, Axis, Graph, ParamVars, ParameterTree, Scalar, Segment, Tensor, Var};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// All tokens through the encoder, decoder input = encoder output + position embedding.
    TrainFull,
    /// Kept tokens through the encoder, side-interpolater fills the rest.
    TrainMasked,
    /// Same wiring as `TrainFull`.
    Inference,
}

/// One forward batch. Latents are stacked one per row in `c, h, w` order.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a, T> {
    pub x_t: &'a Tensor<T>,
    /// Timestep fed to the sinusoidal features, one per sample.
    pub t: &'a [f64],
    /// Class per sample; `classes` is the null label.
    pub labels: &'a [usize],
}

/// What each block actually consumed during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WiringTrace {
    /// Per encoder block (1-based order), the block outputs concatenated into
    /// its input; 0 stands for the embedded tokens.
    pub encoder: Vec<Vec<usize>>,
    /// Per decoder block, whether the embedded noisy tokens were concatenated.
    pub decoder_uses_input: Vec<bool>,
    pub side_interpolater: bool,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B·N, c·p²]` noise prediction in token layout.
    pub eps: Var,
    /// Variance-interpolation logits, same layout, when `learn_sigma` is set.
    pub var_logits: Option<Var>,
    /// `u`: patch embedding plus global position embedding, all N tokens.
    pub embedded: Var,
    pub encoder_out: Var,
    /// Input to the first decoder block (absent for the plain stack).
    pub decoder_input: Option<Var>,
    pub trace: WiringTrace,
}

/// Sinusoidal timestep features: `[cos(t·f_i), sin(t·f_i)]` with
/// `f_i = exp(−ln(10⁴)·i/half)`.
pub fn timestep_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|f| (t * f).cos()).collect();
    out.extend(freqs.iter().map(|f| (t * f).sin()));
    out
}

struct Cond {
    silu_c: Var,
    full_rows: Rc<Vec<usize>>,
}

struct Layouts {
    biased: Rc<AttentionLayout>,
    plain: Rc<AttentionLayout>,
    rows: Rc<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Mdt {
    cfg: ModelConfig,
    geo: TokenGridGeometry,
    full_index: Rc<Vec<usize>>,
}

impl Mdt {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let geo = cfg.geometry()?;
        let all: Vec<usize> = (0..geo.tokens()).collect();
        let full_index = Rc::new(relative_bias_index(&geo, &all)?);
        Ok(Self { cfg, geo, full_index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &TokenGridGeometry {
        &self.geo
    }

    pub fn null_label(&self) -> usize {
        self.cfg.classes
    }

    /// `[B, c·h·w]` latents → `[B·N, c·p²]` tokens.
    pub fn tokens_of<T: Scalar>(&self, latents: &Tensor<T>) -> Result<Tensor<T>> {
        let numel = self.geo.latent_numel();
        if latents.shape().len() != 2 || latents.cols() != numel {
            return Err(Error::Shape {
                op: "tokens_of",
                detail: format!("expected [B, {numel}] latents, got {:?}", latents.shape()),
            });
        }
        let b = latents.rows();
        let mut out = Vec::with_capacity(b * numel);
        for r in 0..b {
            patchify_into(latents.row(r), &self.geo, &mut out);
        }
        Tensor::new(vec![b * self.geo.tokens(), self.geo.token_dim()], out)
    }

    /// Inverse of [`Mdt::tokens_of`].
    pub fn latents_of<T: Scalar>(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, td) = (self.geo.tokens(), self.geo.token_dim());
        if tokens.shape().len() != 2 || tokens.cols() != td || !tokens.rows().is_multiple_of(n) {
            return Err(Error::Shape {
                op: "latents_of",
                detail: format!("expected [B·{n}, {td}] tokens, got {:?}", tokens.shape()),
            });
        }
        let b = tokens.rows() / n;
        let numel = self.geo.latent_numel();
        let mut out = vec![T::zero(); b * numel];
        for (src, dst) in tokens.data().chunks(n * td).zip(out.chunks_mut(numel)) {
            unpatchify_into(src, &self.geo, dst);
        }
        Tensor::new(vec![b, numel], out)
    }

    fn layouts(&self, sample_positions: &[Vec<usize>], n_per: Option<usize>) -> Result<Layouts> {
        let heads = self.cfg.heads;
        let mut biased = Vec::with_capacity(sample_positions.len());
        let mut plain = Vec::with_capacity(sample_positions.len());
        let mut rows = Vec::new();
        let mut start = 0;
        for (b, pos) in sample_positions.iter().enumerate() {
            let len = pos.len();
            let index = if n_per.is_some() {
                self.full_index.clone()
            } else {
                Rc::new(relative_bias_index(&self.geo, pos)?)
            };
            biased.push(Segment {
                start,
                len,
                bias_index: self.cfg.rel_pos_bias.then_some(index),
            });
            plain.push(Segment { start, len, bias_index: None });
            rows.extend(std::iter::repeat_n(b, len));
            start += len;
        }
        Ok(Layouts {
            biased: Rc::new(AttentionLayout { heads, segments: biased }),
            plain: Rc::new(AttentionLayout { heads, segments: plain }),
            rows: Rc::new(rows),
        })
    }

    fn linear<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars, x: Var, prefix: &str) -> Result<Var> {
        let h = g.matmul(x, pv.get(&format!("{prefix}.w"))?)?;
        g.add_row(h, pv.get(&format!("{prefix}.b"))?)
    }

    fn modulate<T: Scalar>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let s1 = g.add_scalar(scale, T::one())?;
        let h = g.mul(x, s1)?;
        g.add(h, shift)
    }

    /// Condition vector `MLP(sinusoid(t)) + y_embed[label]`, one row per sample.
    pub fn condition<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, t: &[f64], labels: &[usize]) -> Result<Var> {
        if t.len() != labels.len() {
            return Err(Error::Shape {
                op: "condition",
                detail: format!("{} timesteps for {} labels", t.len(), labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > self.cfg.classes) {
            return Err(Error::Range(format!(
                "label {bad} outside [0, {}] (the last index is the null label)",
                self.cfg.classes
            )));
        }
        let fd = self.cfg.freq_dim;
        let feats: Vec<f64> = t.iter().flat_map(|&ti| timestep_features(ti, fd)).collect();
        let fx = g.constant(Tensor::from_f64(&[t.len(), fd], &feats)?);
        let h = Self::linear(g, pv, fx, "t_embed.fc1")?;
        let h = g.silu(h)?;
        let temb = Self::linear(g, pv, h, "t_embed.fc2")?;
        let yemb = g.gather_rows(pv.get("y_embed")?, Rc::new(labels.to_vec()))?;
        g.add(temb, yemb)
    }

    #[allow(clippy::too_many_arguments)]
    fn block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        prefix: &str,
        x: Var,
        cond: &Cond,
        layouts: &Layouts,
        with_bias: bool,
    ) -> Result<Var> {
        let d = self.cfg.dim;
        let m = Self::linear(g, pv, cond.silu_c, &format!("{prefix}.ada"))?;
        let m = g.gather_rows(m, layouts.rows.clone())?;
        let parts = g.split(m, Axis::Cols, &[d; 6])?;
        let (shift_a, scale_a, gate_a, shift_m, scale_m, gate_m) =
            (parts[0], parts[1], parts[2], parts[3], parts[4], parts[5]);

        let h = g.layer_norm(x, None, None, LN_EPS)?;
        let h = Self::modulate(g, h, shift_a, scale_a)?;
        let qkv = Self::linear(g, pv, h, &format!("{prefix}.qkv"))?;
        let (table, layout) = match pv.opt(&format!("{prefix}.rel_bias")) {
            Some(tab) if with_bias => (Some(tab), layouts.biased.clone()),
            _ => (None, layouts.plain.clone()),
        };
        let a = g.attention(qkv, table, layout)?;
        let a = Self::linear(g, pv, a, &format!("{prefix}.proj"))?;
        let a = g.mul(a, gate_a)?;
        let x = g.add(x, a)?;

        let h = g.layer_norm(x, None, None, LN_EPS)?;
        let h = Self::modulate(g, h, shift_m, scale_m)?;
        let h = Self::linear(g, pv, h, &format!("{prefix}.fc1"))?;
        let h = g.gelu(h)?;
        let h = Self::linear(g, pv, h, &format!("{prefix}.fc2"))?;
        let h = g.mul(h, gate_m)?;
        g.add(x, h)
    }

    fn fuse<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars, prefix: &str, stream: Var, other: Var) -> Result<Var> {
        let cat = g.concat(&[stream, other], Axis::Cols)?;
        Self::linear(g, pv, cat, &format!("{prefix}.skip"))
    }

    fn tile<T: Scalar>(&self, g: &mut Graph<T>, table: Var, batch: usize) -> Result<Var> {
        let n = self.geo.tokens();
        let idx: Vec<usize> = (0..batch * n).map(|r| r % n).collect();
        g.gather_rows(table, Rc::new(idx))
    }

    fn encoder<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        input: Var,
        cond: &Cond,
        layouts: &Layouts,
        trace: &mut WiringTrace,
    ) -> Result<Var> {
        let n1 = self.cfg.encoder_depth();
        let mut outs = vec![input];
        for (k, skip) in encoder_skip_sources(n1).into_iter().enumerate() {
            let i = k + 1;
            let prefix = enc_prefix(i);
            let stream = outs[i - 1];
            let x = match skip {
                Some(src) if self.cfg.variant == Variant::V2 => {
                    trace.encoder.push(vec![i - 1, src]);
                    Self::fuse(g, pv, &prefix, stream, outs[src])?
                }
                _ => {
                    trace.encoder.push(vec![i - 1]);
                    stream
                }
            };
            let y = self.block(g, pv, &prefix, x, cond, layouts, true)?;
            outs.push(y);
        }
        Ok(outs[n1])
    }

    /// Scatter kept rows back onto the grid, fill masked rows with the mask
    /// token, add the decoder position embedding, then predict masked rows
    /// with one block and keep unmasked rows verbatim.
    #[allow(clippy::too_many_arguments)]
    fn side_interpolater<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        enc_out: Var,
        kept_rows: Rc<Vec<usize>>,
        masks: &[MaskSpec],
        cond: &Cond,
        full: &Layouts,
        trace: &mut WiringTrace,
    ) -> Result<Var> {
        let rows = masks.len() * self.geo.tokens();
        let m: Vec<T> = masks.iter().flat_map(|s| s.indicator::<T>()).collect();
        let keep: Vec<T> = m.iter().map(|&v| T::one() - v).collect();
        let m = Rc::new(m);
        let scattered = g.scatter_rows(enc_out, kept_rows, rows)?;
        let tok = g.broadcast_row(pv.get("mask_token")?, rows)?;
        let tok = g.scale_rows(tok, m.clone())?;
        let filled = g.add(scattered, tok)?;
        let pos = self.tile(g, pv.get("dec_pos_embed")?, masks.len())?;
        let q = g.add(filled, pos)?;
        if !self.cfg.side_interpolater {
            return Ok(q);
        }
        trace.side_interpolater = true;
        let k_hat = self.block(g, pv, SIDE_PREFIX, q, cond, full, false)?;
        let a = g.scale_rows(q, Rc::new(keep))?;
        let b = g.scale_rows(k_hat, m)?;
        g.add(a, b)
    }

    /// Records the full forward pass on `g`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        batch: Batch<'_, T>,
        mode: ForwardMode,
        masks: Option<&[MaskSpec]>,
    ) -> Result<ForwardOutput> {
        let bsz = batch.x_t.rows();
        if batch.t.len() != bsz || batch.labels.len() != bsz {
            return Err(Error::Shape {
                op: "forward",
                detail: format!(
                    "{bsz} latents with {} timesteps and {} labels",
                    batch.t.len(),
                    batch.labels.len()
                ),
            });
        }
        let n = self.geo.tokens();
        let masks = match (mode, masks) {
            (ForwardMode::TrainMasked, Some(m)) => {
                if self.cfg.architecture == Architecture::Plain {
                    return Err(Error::Contract("the plain stack has no masked path".into()));
                }
                if m.len() != bsz {
                    return Err(Error::Shape {
                        op: "forward",
                        detail: format!("{} masks for {bsz} samples", m.len()),
                    });
                }
                for spec in m {
                    if spec.tokens() != n {
                        return Err(Error::Shape {
                            op: "forward",
                            detail: format!("mask over {} tokens on a grid of {n}", spec.tokens()),
                        });
                    }
                    if spec.kept.is_empty() {
                        return Err(Error::Contract("mask keeps no tokens for the encoder".into()));
                    }
                }
                Some(m)
            }
            (ForwardMode::TrainMasked, None) => {
                return Err(Error::Contract("masked training pass needs a mask per sample".into()))
            }
            (_, Some(_)) => {
                return Err(Error::Contract(
                    "the side-interpolater and masks are training-only; full and inference passes take no mask".into(),
                ))
            }
            (_, None) => None,
        };

        let tokens = g.constant(self.tokens_of(batch.x_t)?);
        let c = self.condition(g, pv, batch.t, batch.labels)?;
        let silu_c = g.silu(c)?;
        let full_pos: Vec<Vec<usize>> = vec![(0..n).collect(); bsz];
        let full = self.layouts(&full_pos, Some(n))?;
        let cond = Cond {
            silu_c,
            full_rows: full.rows.clone(),
        };

        let x = Self::linear(g, pv, tokens, "x_embed")?;
        let pos = self.tile(g, pv.get("pos_embed")?, bsz)?;
        let u = g.add(x, pos)?;

        let mut trace = WiringTrace::default();
        let (enc_out, decoder_input) = match masks {
            Some(m) => {
                let kept_rows: Vec<usize> = m
                    .iter()
                    .enumerate()
                    .flat_map(|(b, s)| s.kept.iter().map(move |&k| b * n + k))
                    .collect();
                let kept_rows = Rc::new(kept_rows);
                let kept_pos: Vec<Vec<usize>> = m.iter().map(|s| s.kept.clone()).collect();
                let kept = self.layouts(&kept_pos, None)?;
                let enc_in = g.gather_rows(u, kept_rows.clone())?;
                let enc_out = self.encoder(g, pv, enc_in, &cond, &kept, &mut trace)?;
                let k = self.side_interpolater(g, pv, enc_out, kept_rows, m, &cond, &full, &mut trace)?;
                (enc_out, Some(k))
            }
            None => {
                let enc_out = self.encoder(g, pv, u, &cond, &full, &mut trace)?;
                let dec_in = match self.cfg.architecture {
                    Architecture::Asymmetric => {
                        let pos = self.tile(g, pv.get("dec_pos_embed")?, bsz)?;
                        Some(g.add(enc_out, pos)?)
                    }
                    Architecture::Plain => None,
                };
                (enc_out, dec_in)
            }
        };

        let mut stream = decoder_input.unwrap_or(enc_out);
        for j in 1..=self.cfg.effective_decoder_depth() {
            let prefix = dec_prefix(j);
            let x = if self.cfg.variant == Variant::V2 {
                trace.decoder_uses_input.push(true);
                Self::fuse(g, pv, &prefix, stream, u)?
            } else {
                trace.decoder_uses_input.push(false);
                stream
            };
            stream = self.block(g, pv, &prefix, x, &cond, &full, true)?;
        }

        let d = self.cfg.dim;
        let fm = Self::linear(g, pv, cond.silu_c, "final.ada")?;
        let fm = g.gather_rows(fm, cond.full_rows.clone())?;
        let sc = g.split(fm, Axis::Cols, &[d, d])?;
        let h = g.layer_norm(stream, None, None, LN_EPS)?;
        let h = Self::modulate(g, h, sc[0], sc[1])?;
        let out = Self::linear(g, pv, h, "final")?;
        let td = self.geo.token_dim();
        let (eps, var_logits) = if self.cfg.learn_sigma {
            let parts = g.split(out, Axis::Cols, &[td, td])?;
            (parts[0], Some(parts[1]))
        } else {
            (out, None)
        };
        Ok(ForwardOutput {
            eps,
            var_logits,
            embedded: u,
            encoder_out: enc_out,
            decoder_input,
            trace,
        })
    }

    /// Inference-mode prediction without recording gradients. Returns the
    /// noise estimate and, with `learn_sigma`, the variance logits, both as
    /// `[B, c·h·w]` latents.
    pub fn predict<T: Scalar>(
        &self,
        params: &ParameterTree<T>,
        x_t: &Tensor<T>,
        t: &[f64],
        labels: &[usize],
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let b = labels.len();
        let numel = self.geo.latent_numel();
        if x_t.shape() != [b, numel] || t.len() != b {
            return Err(Error::Shape {
                op: "predict",
                detail: format!("x_t {:?}, {} timesteps, {b} labels", x_t.shape(), t.len()),
            });
        }
        // rows are independent; chunking keeps the tape small
        let mut eps = Vec::with_capacity(b * numel);
        let mut var: Option<Vec<T>> = None;
        for lo in (0..b).step_by(PREDICT_CHUNK) {
            let hi = (lo + PREDICT_CHUNK).min(b);
            let x = Tensor::new(vec![hi - lo, numel], x_t.data()[lo * numel..hi * numel].to_vec())?;
            let mut g = Graph::new();
            let pv = params.register_frozen(&mut g);
            let out = self.forward(&mut g, &pv, Batch { x_t: &x, t: &t[lo..hi], labels: &labels[lo..hi] }, ForwardMode::Inference, None)?;
            eps.extend_from_slice(self.latents_of(g.value(out.eps))?.data());
            if let Some(v) = out.var_logits {
                var.get_or_insert_with(|| Vec::with_capacity(b * numel))
                    .extend_from_slice(self.latents_of(g.value(v))?.data());
            }
        }
        let var = var.map(|v| Tensor::new(vec![b, numel], v)).transpose()?;
        Ok((Tensor::new(vec![b, numel], eps)?, var))
    }
}

/// Rows per inference forward pass.
const PREDICT_CHUNK: usize = 64;

#[cfg(test)]
#[path = "model_tests.rs"]
mod tests;
