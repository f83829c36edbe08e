//! Flat `section.key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown or repeated keys are errors. Every key has a default, and the
//! fingerprint hashes the fully resolved key set so that equivalent spellings
//! (`1e-4`, `0.0001`) fingerprint alike.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{gen_synthetic_pairs, read_idx, Dataset, IdxOptions, SyntheticSpec};
use crate::error::{Error, Result};
use crate::network::{ModelConfig, SizePreset, Variant};
use crate::sampling::{GuidanceMode, SamplerConfig};
use crate::schedules::NoiseSchedule;
use crate::training::{OptimizerConfig, OptimizerKind, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    SyntheticPairs,
    IdxImages,
}

impl FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic-pairs" => Ok(Self::SyntheticPairs),
            "idx-images" => Ok(Self::IdxImages),
            _ => Err(Error::Config(format!(
                "unknown data.kind {s:?}; expected synthetic-pairs or idx-images"
            ))),
        }
    }
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SyntheticPairs => "synthetic-pairs",
            Self::IdxImages => "idx-images",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub classes: usize,
    pub size: usize,
    pub height: usize,
    pub channels: usize,
    pub path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    pub steps: usize,
    pub n: usize,
    pub guidance: GuidanceMode,
    pub w: f64,
    pub s: f64,
    pub seed: u64,
    pub use_ema: bool,
    /// Data range mapped onto `[0, 255]` when rendering.
    pub range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Generated and held-out sample counts.
    pub samples: usize,
    pub n_proj: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub sampling: SamplingConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::toy(Variant::V2);
        Self {
            data: DataConfig {
                kind: DataKind::SyntheticPairs,
                classes: model.classes,
                size: 4096,
                height: model.height,
                channels: model.channels,
                path: None,
                labels_path: None,
                seed: 0,
            },
            model,
            diffusion: DiffusionConfig {
                steps: 1000,
                beta_min: 1e-4,
                beta_max: 2e-2,
            },
            train: TrainConfig {
                min_snr_gamma: 5.0,
                ..TrainConfig::default()
            },
            sampling: SamplingConfig {
                steps: 250,
                n: 16,
                guidance: GuidanceMode::PowerCosine,
                w: 3.8,
                s: 4.0,
                seed: 0,
                use_ema: true,
                range: (-1.0, 1.0),
            },
            eval: EvalConfig {
                samples: 1024,
                n_proj: 128,
                seed: 0,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

/// `inf`, `off` and `none` all disable the clamp.
fn parse_gamma(key: &str, v: &str) -> Result<f64> {
    match v {
        "inf" | "off" | "none" => Ok(f64::INFINITY),
        _ => parse(key, v),
    }
}

fn fmt_gamma(g: f64) -> String {
    if g.is_infinite() {
        "inf".into()
    } else {
        g.to_string()
    }
}

/// Splits config text into ordered `(key, value, line)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out: Vec<(String, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if let Some((_, _, first)) = out.iter().find(|(ok, _, _)| ok == k) {
            return Err(Error::Config(format!(
                "line {}: key {k} repeats line {first}",
                i + 1
            )));
        }
        out.push((k.to_string(), v.to_string(), i + 1));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = Self::default();
        // a size preset resets the architecture before explicit keys apply
        if let Some((_, v, _)) = pairs.iter().find(|(k, _, _)| k == "model.size") {
            let size: SizePreset = v.parse()?;
            let variant = match pairs.iter().find(|(k, _, _)| k == "model.variant") {
                Some((_, v, _)) => v.parse()?,
                None => cfg.model.variant,
            };
            let keep = cfg.model.clone();
            cfg.model = ModelConfig::preset(size, variant);
            if size != SizePreset::Toy {
                cfg.model.channels = keep.channels;
                cfg.model.height = keep.height;
                cfg.model.width = keep.width;
                cfg.model.classes = keep.classes;
            }
        }
        for (k, v, _) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.sync()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_text(&text)?;
        // relative data paths resolve against the config file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.path, &mut cfg.data.labels_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies one key. Data geometry keys are mirrored into the model by
    /// [`RunConfig::sync`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "run.version" => {
                let ver: u32 = parse(key, v)?;
                if ver != CONFIG_VERSION {
                    return Err(Error::Config(format!(
                        "config version {ver} unsupported (expected {CONFIG_VERSION})"
                    )));
                }
            }
            "model.size" => m.size = v.parse()?,
            "model.variant" => m.variant = v.parse()?,
            "model.architecture" => m.architecture = v.parse()?,
            "model.n2" => m.decoder_depth = parse(key, v)?,
            "model.dim" => m.dim = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.depth" => m.depth = parse(key, v)?,
            "model.classes" => m.classes = parse(key, v)?,
            "model.patch_size" => m.patch = parse(key, v)?,
            "model.learn_sigma" => m.learn_sigma = parse_bool(key, v)?,
            "model.freq_dim" => m.freq_dim = parse(key, v)?,
            "model.rel_pos_bias" => m.rel_pos_bias = parse_bool(key, v)?,
            "model.side_interpolater" => m.side_interpolater = parse_bool(key, v)?,
            "mask.ratio_lo" => t.mask_ratio.0 = parse(key, v)?,
            "mask.ratio_hi" => t.mask_ratio.1 = parse(key, v)?,
            "mask.supervision" => t.supervision = v.parse()?,
            "diffusion.T" => self.diffusion.steps = parse(key, v)?,
            "diffusion.beta_min" => self.diffusion.beta_min = parse(key, v)?,
            "diffusion.beta_max" => self.diffusion.beta_max = parse(key, v)?,
            "diffusion.min_snr_gamma" => t.min_snr_gamma = parse_gamma(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.batch" => t.batch = parse(key, v)?,
            "train.lr" => t.optimizer.lr = parse(key, v)?,
            "train.optimizer" => {
                let kind: OptimizerKind = v.parse()?;
                if kind != t.optimizer.kind {
                    let lr = t.optimizer.lr;
                    let wd = t.optimizer.weight_decay;
                    t.optimizer = match kind {
                        OptimizerKind::AdamW => OptimizerConfig::adamw(lr),
                        OptimizerKind::Adan => OptimizerConfig::adan(lr),
                    };
                    t.optimizer.weight_decay = wd;
                }
            }
            "train.weight_decay" => t.optimizer.weight_decay = parse(key, v)?,
            "train.ema_decay" => t.ema_decay = parse(key, v)?,
            "train.label_dropout" => t.label_dropout = parse(key, v)?,
            "train.vlb_lambda" => t.vlb_lambda = parse(key, v)?,
            "train.grad_clip" => {
                t.grad_clip = match v {
                    "off" | "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "train.seed" => t.seed = parse(key, v)?,
            "train.ckpt_every" => t.ckpt_every = parse(key, v)?,
            "data.kind" => self.data.kind = v.parse()?,
            "data.classes" => self.data.classes = parse(key, v)?,
            "data.size" => self.data.size = parse(key, v)?,
            "data.h" => self.data.height = parse(key, v)?,
            "data.c" => self.data.channels = parse(key, v)?,
            "data.path" => self.data.path = Some(PathBuf::from(v)),
            "data.labels" => self.data.labels_path = Some(PathBuf::from(v)),
            "data.seed" => self.data.seed = parse(key, v)?,
            "sampling.steps" => self.sampling.steps = parse(key, v)?,
            "sampling.n" => self.sampling.n = parse(key, v)?,
            "sampling.seed" => self.sampling.seed = parse(key, v)?,
            "sampling.use_ema" => self.sampling.use_ema = parse_bool(key, v)?,
            "sampling.range_lo" => self.sampling.range.0 = parse(key, v)?,
            "sampling.range_hi" => self.sampling.range.1 = parse(key, v)?,
            "guidance.mode" => self.sampling.guidance = v.parse()?,
            "guidance.w" => self.sampling.w = parse(key, v)?,
            "guidance.s" => self.sampling.s = parse(key, v)?,
            "eval.samples" => self.eval.samples = parse(key, v)?,
            "eval.n_proj" => self.eval.n_proj = parse(key, v)?,
            "eval.seed" => self.eval.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Copies data geometry and class count into the model.
    fn sync(&mut self) -> Result<()> {
        if self.model.classes != self.data.classes {
            let default = RunConfig::default();
            // whichever side was left at its default follows the other
            if self.model.classes == default.model.classes {
                self.model.classes = self.data.classes;
            } else if self.data.classes == default.data.classes {
                self.data.classes = self.model.classes;
            } else {
                return Err(Error::Config(format!(
                    "model.classes = {} disagrees with data.classes = {}",
                    self.model.classes, self.data.classes
                )));
            }
        }
        self.model.channels = self.data.channels;
        self.model.height = self.data.height;
        self.model.width = self.data.height;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.schedule()?;
        if self.data.kind == DataKind::IdxImages && self.data.path.is_none() {
            return Err(Error::Config("data.kind = idx-images needs data.path".into()));
        }
        if self.sampling.steps == 0 || self.sampling.steps > self.diffusion.steps {
            return Err(Error::Config(format!(
                "sampling.steps must be in 1..={}",
                self.diffusion.steps
            )));
        }
        if !(self.sampling.range.1 > self.sampling.range.0) {
            return Err(Error::Config("sampling.range_hi must exceed sampling.range_lo".into()));
        }
        if self.eval.n_proj < 64 {
            return Err(Error::Config("eval.n_proj must be at least 64".into()));
        }
        if self.eval.samples == 0 {
            return Err(Error::Config("eval.samples must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion.steps, self.diffusion.beta_min, self.diffusion.beta_max)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec::new(self.data.classes, self.data.channels, self.data.height, self.data.size)
    }

    /// Builds the raw (unnormalized) training set.
    pub fn dataset(&self) -> Result<Dataset> {
        match self.data.kind {
            DataKind::SyntheticPairs => gen_synthetic_pairs(&self.synthetic_spec(), self.data.seed),
            DataKind::IdxImages => {
                let path = self.data.path.as_ref().expect("validated");
                read_idx(
                    path,
                    &IdxOptions {
                        channels: self.data.channels,
                        height: self.data.height,
                        width: self.data.height,
                        labels: self.data.labels_path.clone(),
                        classes: self.data.classes,
                    },
                )
            }
        }
    }

    pub fn sampler(&self, labels: Vec<usize>) -> SamplerConfig {
        SamplerConfig {
            n_steps: self.sampling.steps,
            guidance: self.sampling.guidance,
            w: self.sampling.w,
            s: self.sampling.s,
            labels,
            seed: self.sampling.seed,
            use_ema: self.sampling.use_ema,
        }
    }

    /// Every key with its resolved value, sorted.
    pub fn canonical(&self) -> BTreeMap<&'static str, String> {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or("".to_string(), |p| p.display().to_string());
        BTreeMap::from([
            ("run.version", CONFIG_VERSION.to_string()),
            ("model.size", m.size.to_string()),
            ("model.variant", m.variant.to_string()),
            ("model.architecture", m.architecture.to_string()),
            ("model.n2", m.decoder_depth.to_string()),
            ("model.dim", m.dim.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.depth", m.depth.to_string()),
            ("model.classes", m.classes.to_string()),
            ("model.patch_size", m.patch.to_string()),
            ("model.learn_sigma", m.learn_sigma.to_string()),
            ("model.freq_dim", m.freq_dim.to_string()),
            ("model.rel_pos_bias", m.rel_pos_bias.to_string()),
            ("model.side_interpolater", m.side_interpolater.to_string()),
            ("mask.ratio_lo", t.mask_ratio.0.to_string()),
            ("mask.ratio_hi", t.mask_ratio.1.to_string()),
            ("mask.supervision", t.supervision.to_string()),
            ("diffusion.T", self.diffusion.steps.to_string()),
            ("diffusion.beta_min", self.diffusion.beta_min.to_string()),
            ("diffusion.beta_max", self.diffusion.beta_max.to_string()),
            ("diffusion.min_snr_gamma", fmt_gamma(t.min_snr_gamma)),
            ("train.steps", t.steps.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.lr", t.optimizer.lr.to_string()),
            ("train.optimizer", t.optimizer.kind.to_string()),
            ("train.weight_decay", t.optimizer.weight_decay.to_string()),
            ("train.ema_decay", t.ema_decay.to_string()),
            ("train.label_dropout", t.label_dropout.to_string()),
            ("train.vlb_lambda", t.vlb_lambda.to_string()),
            ("train.grad_clip", t.grad_clip.map_or("off".into(), |c| c.to_string())),
            ("train.seed", t.seed.to_string()),
            ("train.ckpt_every", t.ckpt_every.to_string()),
            ("data.kind", d.kind.to_string()),
            ("data.classes", d.classes.to_string()),
            ("data.size", d.size.to_string()),
            ("data.h", d.height.to_string()),
            ("data.c", d.channels.to_string()),
            ("data.path", opt(&d.path)),
            ("data.labels", opt(&d.labels_path)),
            ("data.seed", d.seed.to_string()),
            ("sampling.steps", self.sampling.steps.to_string()),
            ("sampling.n", self.sampling.n.to_string()),
            ("sampling.seed", self.sampling.seed.to_string()),
            ("sampling.use_ema", self.sampling.use_ema.to_string()),
            ("sampling.range_lo", self.sampling.range.0.to_string()),
            ("sampling.range_hi", self.sampling.range.1.to_string()),
            ("guidance.mode", self.sampling.guidance.to_string()),
            ("guidance.w", self.sampling.w.to_string()),
            ("guidance.s", self.sampling.s.to_string()),
            ("eval.samples", self.eval.samples.to_string()),
            ("eval.n_proj", self.eval.n_proj.to_string()),
            ("eval.seed", self.eval.seed.to_string()),
        ])
    }

    /// Text that parses back to this configuration.
    pub fn to_text(&self) -> String {
        self.canonical()
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// First 16 hex digits of SHA-256 over the canonical key set.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.canonical() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Supervision;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
        assert_eq!(cfg.fingerprint().len(), 16);
    }

    #[test]
    fn unknown_and_repeated_keys_fail() {
        let e = RunConfig::from_text("train.stpes = 3").unwrap_err();
        assert!(e.to_string().contains("train.stpes"));
        assert!(RunConfig::from_text("train.steps = 3\ntrain.steps = 4").is_err());
        assert!(RunConfig::from_text("just words").is_err());
        assert!(RunConfig::from_text("run.version = 2").is_err());
    }

    #[test]
    fn equivalent_spellings_share_fingerprint() {
        let a = RunConfig::from_text("train.lr = 1e-4 # comment\n").unwrap();
        let b = RunConfig::from_text("\ntrain.lr=0.0001").unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = RunConfig::from_text("train.lr = 0.0002").unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn keys_reach_typed_fields() {
        let cfg = RunConfig::from_text(
            "model.variant = v1\nmodel.n2 = 2\ntrain.optimizer = adan\ntrain.lr = 3e-4\n\
             diffusion.min_snr_gamma = inf\nmask.ratio_lo = 0.3\nmask.ratio_hi = 0.5\n\
             data.h = 16\ndata.c = 1\nguidance.mode = fixed\nmask.supervision = masked",
        )
        .unwrap();
        assert_eq!(cfg.model.variant, Variant::V1);
        assert_eq!(cfg.train.optimizer.kind, OptimizerKind::Adan);
        assert_eq!(cfg.train.optimizer.lr, 3e-4);
        assert_eq!(cfg.train.optimizer.betas, [0.98, 0.92, 0.99]);
        assert!(cfg.train.min_snr_gamma.is_infinite());
        assert_eq!(cfg.train.mask_ratio, (0.3, 0.5));
        assert_eq!((cfg.model.channels, cfg.model.height, cfg.model.width), (1, 16, 16));
        assert_eq!(cfg.sampling.guidance, GuidanceMode::Fixed);
        assert_eq!(cfg.train.supervision, Supervision::MaskedOnly);
    }

    #[test]
    fn presets_and_cross_checks() {
        let cfg = RunConfig::from_text("model.size = S\nmodel.variant = v2").unwrap();
        assert_eq!((cfg.model.depth, cfg.model.dim, cfg.model.decoder_depth), (12, 384, 6));
        assert!(RunConfig::from_text("model.classes = 3\ndata.classes = 4").is_err());
        let c = RunConfig::from_text("data.classes = 4").unwrap();
        assert_eq!(c.model.classes, 4);
        assert!(RunConfig::from_text("data.kind = idx-images").is_err());
        assert!(RunConfig::from_text("model.architecture = plain\nmodel.variant = v2").is_err());
        assert!(RunConfig::from_text("eval.n_proj = 10").is_err());
    }
}
