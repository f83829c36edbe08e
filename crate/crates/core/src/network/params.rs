//! Parameter layout and initialization.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Normal, StandardNormal};

use super::config::{Architecture, ModelConfig, Variant};
use crate::error::Result;
use crate::numerics::{ParameterTree, Scalar, SeededRng, Stream, Tensor};

pub(crate) fn enc_prefix(i: usize) -> String {
    format!("enc.{i:02}")
}

pub(crate) fn dec_prefix(j: usize) -> String {
    format!("dec.{j:02}")
}

pub(crate) const SIDE_PREFIX: &str = "side";

/// 1-based encoder blocks that take a long-shortcut, with their source block:
/// block `i > N1/2` concatenates the output of block `N1 − i + 1`.
pub fn encoder_skip_sources(encoder_depth: usize) -> Vec<Option<usize>> {
    (1..=encoder_depth)
        .map(|i| (2 * i > encoder_depth).then(|| encoder_depth - i + 1))
        .collect()
}

fn block_shapes(cfg: &ModelConfig, prefix: &str, with_bias: bool, out: &mut BTreeMap<String, Vec<usize>>) {
    let d = cfg.dim;
    let hidden = d * cfg.mlp_ratio;
    let mut put = |k: &str, s: Vec<usize>| {
        out.insert(format!("{prefix}.{k}"), s);
    };
    put("ada.w", vec![d, 6 * d]);
    put("ada.b", vec![6 * d]);
    put("qkv.w", vec![d, 3 * d]);
    put("qkv.b", vec![3 * d]);
    put("proj.w", vec![d, d]);
    put("proj.b", vec![d]);
    put("fc1.w", vec![d, hidden]);
    put("fc1.b", vec![hidden]);
    put("fc2.w", vec![hidden, d]);
    put("fc2.b", vec![d]);
    if with_bias {
        put("rel_bias", vec![cfg.heads, cfg.bias_table_extent()]);
    }
}

/// Name → shape for every parameter; depends on the config alone.
pub fn param_shapes(cfg: &ModelConfig) -> Result<BTreeMap<String, Vec<usize>>> {
    cfg.validate()?;
    let geo = cfg.geometry()?;
    let (d, n) = (cfg.dim, geo.tokens());
    let mut s = BTreeMap::new();
    s.insert("x_embed.w".into(), vec![geo.token_dim(), d]);
    s.insert("x_embed.b".into(), vec![d]);
    s.insert("pos_embed".into(), vec![n, d]);
    s.insert("t_embed.fc1.w".into(), vec![cfg.freq_dim, d]);
    s.insert("t_embed.fc1.b".into(), vec![d]);
    s.insert("t_embed.fc2.w".into(), vec![d, d]);
    s.insert("t_embed.fc2.b".into(), vec![d]);
    s.insert("y_embed".into(), vec![cfg.classes + 1, d]);
    s.insert("final.ada.w".into(), vec![d, 2 * d]);
    s.insert("final.ada.b".into(), vec![2 * d]);
    s.insert("final.w".into(), vec![d, cfg.patch * cfg.patch * cfg.out_channels()]);
    s.insert("final.b".into(), vec![cfg.patch * cfg.patch * cfg.out_channels()]);

    let n1 = cfg.encoder_depth();
    for (i, skip) in encoder_skip_sources(n1).into_iter().enumerate() {
        let p = enc_prefix(i + 1);
        block_shapes(cfg, &p, cfg.rel_pos_bias, &mut s);
        if cfg.variant == Variant::V2 && skip.is_some() {
            s.insert(format!("{p}.skip.w"), vec![2 * d, d]);
            s.insert(format!("{p}.skip.b"), vec![d]);
        }
    }
    if cfg.architecture == Architecture::Asymmetric {
        s.insert("dec_pos_embed".into(), vec![n, d]);
        s.insert("mask_token".into(), vec![1, d]);
        if cfg.side_interpolater {
            block_shapes(cfg, SIDE_PREFIX, false, &mut s);
        }
        for j in 1..=cfg.decoder_depth {
            let p = dec_prefix(j);
            block_shapes(cfg, &p, cfg.rel_pos_bias, &mut s);
            if cfg.variant == Variant::V2 {
                s.insert(format!("{p}.skip.w"), vec![2 * d, d]);
                s.insert(format!("{p}.skip.b"), vec![d]);
            }
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Xavier linears, zeroed modulation and output head, sin-cos position
    /// tables, identity stream path through shortcut fusions.
    Standard,
    /// Every entry i.i.d. normal with the given std; used to exercise every
    /// gradient path.
    Random { std: f64 },
}

fn sincos_2d(gh: usize, gw: usize, d: usize) -> Vec<f64> {
    // first half of the channels encodes the row, second half the column
    let half = d / 2;
    let mut out = Vec::with_capacity(gh * gw * d);
    for r in 0..gh {
        for c in 0..gw {
            for (coord, width) in [(r as f64, half), (c as f64, d - half)] {
                let q = (width / 2).max(1);
                for k in 0..width {
                    let omega = 1.0 / 10000f64.powf((k % q) as f64 / q as f64);
                    out.push(if k < q { (coord * omega).sin() } else { (coord * omega).cos() });
                }
            }
        }
    }
    out
}

pub fn init_params<T: Scalar>(cfg: &ModelConfig, scheme: InitScheme, seed: u64) -> Result<ParameterTree<T>> {
    let shapes = param_shapes(cfg)?;
    let geo = cfg.geometry()?;
    let mut rng = SeededRng::new(seed, Stream::Init);
    let mut tree = ParameterTree::new();
    for (name, shape) in shapes {
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = match scheme {
            InitScheme::Random { std } => (0..numel).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
            InitScheme::Standard => standard_init(&name, &shape, cfg, &geo, &mut rng),
        };
        tree.insert(name, Tensor::from_f64(&shape, &values)?);
    }
    Ok(tree)
}

fn standard_init(
    name: &str,
    shape: &[usize],
    cfg: &ModelConfig,
    geo: &crate::masking::TokenGridGeometry,
    rng: &mut SeededRng,
) -> Vec<f64> {
    let numel: usize = shape.iter().product();
    let zeros = vec![0.0; numel];
    let normal = |rng: &mut SeededRng, std: f64| -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("positive std");
        (0..numel).map(|_| rng.sample(dist)).collect()
    };
    if name == "pos_embed" || name == "dec_pos_embed" {
        return sincos_2d(geo.grid_h(), geo.grid_w(), cfg.dim);
    }
    if name == "mask_token" || name.starts_with("t_embed") && name.ends_with(".w") || name == "y_embed" {
        return normal(rng, 0.02);
    }
    if name.ends_with("rel_bias") {
        return normal(rng, 0.02);
    }
    if name.starts_with("final") || name.contains(".ada.") || name.ends_with(".b") {
        return zeros;
    }
    if name.ends_with("skip.w") {
        // [stream; shortcut] → stream passes through unchanged at init
        let d = shape[1];
        let mut w = zeros;
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        return w;
    }
    // Xavier uniform on [fan_in, fan_out]
    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    (0..numel).map(|_| rng.random_range(-limit..limit)).collect()
}
