use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv_out_size;

/// Named architecture presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Full-size network: 224px frames, 16x16x256 features, 12-block 768-wide transformer.
    PaperDefault,
    /// Desk-scale network with identical code paths.
    #[default]
    DeskReduced,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-default" => Ok(Preset::PaperDefault),
            "desk-reduced" => Ok(Preset::DeskReduced),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

/// How the adaptive layer is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AdaptiveInit {
    /// `h = z` at the start of adaptation.
    #[default]
    Identity,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Frames per clip.
    pub clip_len: usize,
    pub image_size: usize,
    /// Output channels of the stride-2 3x3 encoder convolutions.
    pub encoder_channels: Vec<usize>,
    /// Side of the pooled spatial feature grid.
    pub feature_grid: usize,
    /// Channels of each spatial feature cell (`d_t`).
    pub feature_dim: usize,
    /// Transformer width (`d_z`).
    pub token_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub adaptive_init: AdaptiveInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(Preset::DeskReduced)
    }
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::PaperDefault => Self {
                clip_len: 20,
                image_size: 224,
                encoder_channels: vec![64, 128, 256],
                feature_grid: 16,
                feature_dim: 256,
                token_dim: 768,
                blocks: 12,
                heads: 12,
                mlp_ratio: 4,
                n_classes: 2,
                adaptive_init: AdaptiveInit::Identity,
            },
            Preset::DeskReduced => Self {
                clip_len: 20,
                image_size: 64,
                encoder_channels: vec![8, 16, 32],
                feature_grid: 4,
                feature_dim: 32,
                token_dim: 64,
                blocks: 2,
                heads: 4,
                mlp_ratio: 4,
                n_classes: 2,
                adaptive_init: AdaptiveInit::Identity,
            },
        }
    }

    pub fn paper_default() -> Self {
        Self::preset(Preset::PaperDefault)
    }

    pub fn desk_reduced() -> Self {
        Self::preset(Preset::DeskReduced)
    }

    /// Tokens per clip: one per grid cell per frame.
    pub fn num_tokens(&self) -> usize {
        self.clip_len * self.feature_grid * self.feature_grid
    }

    /// Spatial side of the last encoder feature map, before pooling.
    pub fn encoder_output_size(&self) -> usize {
        self.encoder_channels
            .iter()
            .fold(self.image_size, |size, _| conv_out_size(size, 2))
    }

    pub fn feature_shape(&self) -> (usize, usize, usize, usize) {
        (self.clip_len, self.feature_grid, self.feature_grid, self.feature_dim)
    }

    pub fn clip_shape(&self) -> (usize, usize, usize, usize) {
        (self.clip_len, self.image_size, self.image_size, 3)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("clip_len", self.clip_len),
            ("image_size", self.image_size),
            ("feature_grid", self.feature_grid),
            ("feature_dim", self.feature_dim),
            ("token_dim", self.token_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.n_classes != 2 {
            return Err(Error::Config("model.n_classes must be 2 (real, fake)".into()));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config(
                "model.encoder_channels must be a non-empty list of positive widths".into(),
            ));
        }
        if *self.encoder_channels.last().expect("non-empty") != self.feature_dim {
            return Err(Error::Config(format!(
                "last encoder channel count {} must equal feature_dim {}",
                self.encoder_channels.last().unwrap(),
                self.feature_dim
            )));
        }
        if self.token_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "token_dim {} is not divisible by heads {}",
                self.token_dim, self.heads
            )));
        }
        if self.encoder_output_size() < self.feature_grid {
            return Err(Error::Config(format!(
                "encoder output {}x{} is smaller than the feature grid {}",
                self.encoder_output_size(),
                self.encoder_output_size(),
                self.feature_grid
            )));
        }
        Ok(())
    }
}
