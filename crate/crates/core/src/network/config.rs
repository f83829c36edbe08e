use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::masking::TokenGridGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizePreset {
    Small,
    Base,
    XLarge,
    Toy,
}

impl FromStr for SizePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" | "small" => Ok(Self::Small),
            "b" | "base" => Ok(Self::Base),
            "xl" | "xlarge" => Ok(Self::XLarge),
            "toy" => Ok(Self::Toy),
            other => Err(Error::Config(format!("unknown model size {other:?}"))),
        }
    }
}

impl fmt::Display for SizePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Small => "S",
            Self::Base => "B",
            Self::XLarge => "XL",
            Self::Toy => "toy",
        })
    }
}

/// v1: plain encoder/decoder stacks. v2: encoder long-shortcuts and decoder
/// dense input-shortcuts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    V1,
    V2,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" | "1" => Ok(Self::V1),
            "v2" | "2" => Ok(Self::V2),
            other => Err(Error::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::V1 => "v1",
            Self::V2 => "v2",
        })
    }
}

/// `Asymmetric` is the encoder / side-interpolater / decoder network.
/// `Plain` folds every block into one stack with no masking support: the
/// DiT-style control used by convergence comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Asymmetric,
    Plain,
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "asymmetric" | "mdt" => Ok(Self::Asymmetric),
            "plain" | "dit" => Ok(Self::Plain),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Asymmetric => "asymmetric",
            Self::Plain => "plain",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub size: SizePreset,
    pub variant: Variant,
    pub architecture: Architecture,
    /// Total blocks `N1 + N2`.
    pub depth: usize,
    /// Decoder blocks `N2` (ignored by the plain architecture).
    pub decoder_depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Real classes; index `classes` is the null label.
    pub classes: usize,
    /// Second output group for the variance-interpolation logit.
    pub learn_sigma: bool,
    /// Width of the sinusoidal timestep features.
    pub freq_dim: usize,
    pub mlp_ratio: usize,
    pub rel_pos_bias: bool,
    pub side_interpolater: bool,
}

impl ModelConfig {
    /// Table presets on a 32×32×4 latent with p = 2.
    pub fn preset(size: SizePreset, variant: Variant) -> Self {
        let (depth, dim, heads) = match size {
            SizePreset::Small => (12, 384, 6),
            SizePreset::Base => (12, 768, 12),
            SizePreset::XLarge => (28, 1152, 16),
            SizePreset::Toy => return Self::toy(variant),
        };
        let decoder_depth = match (variant, size) {
            (Variant::V1, _) => 2,
            (Variant::V2, SizePreset::Small) => 6,
            (Variant::V2, _) => 4,
        };
        Self {
            size,
            variant,
            architecture: Architecture::Asymmetric,
            depth,
            decoder_depth,
            dim,
            heads,
            patch: 2,
            channels: 4,
            height: 32,
            width: 32,
            classes: 1000,
            learn_sigma: false,
            freq_dim: 256,
            mlp_ratio: 4,
            rel_pos_bias: true,
            side_interpolater: true,
        }
    }

    /// d = 64, 4 heads, depth 8, on an 8×8×2 latent with p = 2 (a 4×4 grid).
    pub fn toy(variant: Variant) -> Self {
        Self {
            size: SizePreset::Toy,
            variant,
            architecture: Architecture::Asymmetric,
            depth: 8,
            decoder_depth: if variant == Variant::V1 { 2 } else { 4 },
            dim: 64,
            heads: 4,
            patch: 2,
            channels: 2,
            height: 8,
            width: 8,
            classes: 2,
            learn_sigma: false,
            freq_dim: 64,
            mlp_ratio: 4,
            rel_pos_bias: true,
            side_interpolater: true,
        }
    }

    pub fn geometry(&self) -> Result<TokenGridGeometry> {
        TokenGridGeometry::new(self.channels, self.height, self.width, self.patch)
    }

    /// Encoder blocks `N1`.
    pub fn encoder_depth(&self) -> usize {
        match self.architecture {
            Architecture::Asymmetric => self.depth - self.decoder_depth,
            Architecture::Plain => self.depth,
        }
    }

    pub fn effective_decoder_depth(&self) -> usize {
        match self.architecture {
            Architecture::Asymmetric => self.decoder_depth,
            Architecture::Plain => 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn out_channels(&self) -> usize {
        if self.learn_sigma {
            2 * self.channels
        } else {
            self.channels
        }
    }

    /// Entries per head in a relative-bias table: `(2g_h−1)(2g_w−1)`.
    pub fn bias_table_extent(&self) -> usize {
        let gh = self.height / self.patch;
        let gw = self.width / self.patch;
        (2 * gh - 1) * (2 * gw - 1)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.freq_dim == 0 || !self.freq_dim.is_multiple_of(2) {
            return Err(Error::Config("freq_dim must be even and positive".into()));
        }
        if self.classes == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("classes and mlp_ratio must be positive".into()));
        }
        match self.architecture {
            Architecture::Asymmetric => {
                if self.decoder_depth < 1 || self.depth < self.decoder_depth + 2 {
                    return Err(Error::Config(format!(
                        "need N1 >= 2 and N2 >= 1, got depth {} with N2 = {}",
                        self.depth, self.decoder_depth
                    )));
                }
                if self.variant == Variant::V2 && !self.encoder_depth().is_multiple_of(2) {
                    return Err(Error::Config(format!(
                        "v2 long-shortcuts need an even encoder depth, got N1 = {}",
                        self.encoder_depth()
                    )));
                }
            }
            Architecture::Plain => {
                if self.depth < 1 {
                    return Err(Error::Config("plain stack needs at least one block".into()));
                }
                if self.variant == Variant::V2 {
                    return Err(Error::Config("the plain stack has no v2 shortcuts".into()));
                }
            }
        }
        Ok(())
    }
}
