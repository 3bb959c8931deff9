use serde::{Deserialize, Serialize};

use crate::audio::FeatureKind;
use crate::error::{Error, Result};

/// Conformer encoder with multi-layer feature aggregation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformerConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ff_units: usize,
    pub conv_kernel: usize,
    pub embed_dim: usize,
    pub input_dim: usize,
    /// Time stride of the convolutional front end (1 or 2).
    pub subsample_factor: usize,
    /// Hidden width of the attentive pooling scorer.
    #[serde(default = "default_pool_dim")]
    pub pool_attention_dim: usize,
}

fn default_pool_dim() -> usize {
    256
}

impl ConformerConfig {
    /// 6 layers of width 512, 8 heads, 2048 feed-forward units, kernel 15,
    /// 256-dimensional embeddings over 80 log-mel bins.
    pub fn paper() -> Self {
        Self {
            n_layers: 6,
            model_dim: 512,
            n_heads: 8,
            ff_units: 2048,
            conv_kernel: 15,
            embed_dim: 256,
            input_dim: 80,
            subsample_factor: 2,
            pool_attention_dim: 256,
        }
    }

    /// Small configuration for tests and laptop-scale training.
    pub fn desk() -> Self {
        Self {
            n_layers: 2,
            model_dim: 32,
            n_heads: 4,
            ff_units: 64,
            conv_kernel: 7,
            embed_dim: 16,
            input_dim: 80,
            subsample_factor: 2,
            pool_attention_dim: 16,
        }
    }

    /// Twice the depth.
    pub fn deeper(mut self) -> Self {
        self.n_layers *= 2;
        self
    }

    /// Wider layers with proportionally more heads (head width unchanged).
    pub fn wider(mut self, model_dim: usize) -> Self {
        let head_dim = self.model_dim / self.n_heads;
        self.model_dim = model_dim;
        self.n_heads = model_dim / head_dim;
        self
    }

    pub fn with_embed_dim(mut self, embed_dim: usize) -> Self {
        self.embed_dim = embed_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("model_dim", self.model_dim),
            ("n_heads", self.n_heads),
            ("ff_units", self.ff_units),
            ("conv_kernel", self.conv_kernel),
            ("embed_dim", self.embed_dim),
            ("input_dim", self.input_dim),
            ("pool_attention_dim", self.pool_attention_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.model_dim {} is not divisible by model.n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config("model.conv_kernel must be odd".into()));
        }
        if !(1..=2).contains(&self.subsample_factor) {
            return Err(Error::Config("model.subsample_factor must be 1 or 2".into()));
        }
        if self.input_dim < 3 {
            return Err(Error::Config("model.input_dim must be at least 3".into()));
        }
        Ok(())
    }
}

/// ECAPA-style TDNN with SE-Res2Net blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcapaConfig {
    pub channels: usize,
    pub n_blocks: usize,
    pub embed_dim: usize,
    pub input_dim: usize,
    pub res2net_scale: usize,
    pub se_bottleneck: usize,
    /// Output width of the convolution over the concatenated block outputs.
    pub mfa_channels: usize,
    pub attention_channels: usize,
}

impl EcapaConfig {
    /// The 1024-channel variant with 256-dimensional embeddings over 80 MFCCs.
    pub fn paper() -> Self {
        Self {
            channels: 1024,
            n_blocks: 3,
            embed_dim: 256,
            input_dim: 80,
            res2net_scale: 8,
            se_bottleneck: 128,
            mfa_channels: 1536,
            attention_channels: 128,
        }
    }

    pub fn desk() -> Self {
        Self {
            channels: 16,
            n_blocks: 3,
            embed_dim: 8,
            input_dim: 20,
            res2net_scale: 4,
            se_bottleneck: 8,
            mfa_channels: 24,
            attention_channels: 8,
        }
    }

    /// Dilation of block `i` (0-based): 2, 3, 4, ...
    pub fn dilation(&self, block: usize) -> usize {
        block + 2
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("n_blocks", self.n_blocks),
            ("embed_dim", self.embed_dim),
            ("input_dim", self.input_dim),
            ("res2net_scale", self.res2net_scale),
            ("se_bottleneck", self.se_bottleneck),
            ("mfa_channels", self.mfa_channels),
            ("attention_channels", self.attention_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.res2net_scale < 2 || !self.channels.is_multiple_of(self.res2net_scale) {
            return Err(Error::Config(format!(
                "model.channels {} must split into model.res2net_scale {} >= 2 groups",
                self.channels, self.res2net_scale
            )));
        }
        Ok(())
    }
}

/// Architecture selector as stored in checkpoints and training configs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum ModelConfig {
    Conformer(ConformerConfig),
    Ecapa(EcapaConfig),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Conformer(c) => c.validate(),
            ModelConfig::Ecapa(c) => c.validate(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            ModelConfig::Conformer(c) => c.embed_dim,
            ModelConfig::Ecapa(c) => c.embed_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelConfig::Conformer(c) => c.input_dim,
            ModelConfig::Ecapa(c) => c.input_dim,
        }
    }

    /// Log-mel for the conformer, MFCC for the TDNN.
    pub fn feature_kind(&self) -> FeatureKind {
        match self {
            ModelConfig::Conformer(_) => FeatureKind::LogMel,
            ModelConfig::Ecapa(_) => FeatureKind::Mfcc,
        }
    }
}

/// Parameter counts of the two convolutional baselines, kept for reference
/// only; their bodies are not implemented.
pub const RES2NET_SE50_PARAMS: usize = 9_290_000;
pub const RAWNET3_PARAMS: usize = 16_280_000;
