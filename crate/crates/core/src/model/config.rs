use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    /// Transformer path only.
    Vit,
    /// Convolutional path only.
    Cnn,
    /// Both paths, projected and summed at the bottleneck.
    Hybrid,
}

impl std::str::FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit" => Ok(Self::Vit),
            "cnn" => Ok(Self::Cnn),
            "hybrid" => Ok(Self::Hybrid),
            other => Err(Error::InvalidArgument(format!("unknown encoder variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Edge length of the cubic input patch.
    pub patch_size: usize,
    pub encoder: EncoderVariant,
    /// Number of stride-2 stages; the bottleneck is `patch_size / 2^depth`.
    pub depth: usize,
    pub base_channels: usize,
    pub transformer_blocks: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub interaction_blocks: usize,
    /// Number of candidate masks M.
    pub mask_heads: usize,
    /// Channels of the last decoder feature map.
    pub decoder_channels: usize,
    /// Scribble voxels kept as tokens per scribble; 0 disables scribble tokens.
    pub scribble_tokens: usize,
    pub corrective_factor: usize,
    pub corrective_channels: usize,
    /// Refine the selected candidate; when off, y' is the selected candidate itself.
    pub corrective: bool,
    /// Bandwidth of the random Fourier positional encoding.
    pub fourier_scale: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            encoder: EncoderVariant::Hybrid,
            depth: 3,
            base_channels: 8,
            transformer_blocks: 2,
            heads: 4,
            head_dim: 32,
            interaction_blocks: 2,
            mask_heads: 3,
            decoder_channels: 8,
            scribble_tokens: 16,
            corrective_factor: 2,
            corrective_channels: 8,
            corrective: true,
            fourier_scale: 1.0,
        }
    }
}

impl ModelConfig {
    /// Embedding width shared by image and prompt tokens.
    pub fn embed_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Spatial edge of the bottleneck feature map (and of the transformer token grid).
    pub fn bottleneck_size(&self) -> usize {
        self.patch_size >> self.depth
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_size == 0 || self.depth == 0 {
            return bad("patch_size and depth must be positive".into());
        }
        if self.patch_size % (1 << self.depth) != 0 {
            return bad(format!("patch size {} is not divisible by 2^{}", self.patch_size, self.depth));
        }
        if self.heads == 0 || self.head_dim == 0 || self.embed_dim() % 2 != 0 {
            return bad("embedding width must be positive and even".into());
        }
        if self.mask_heads == 0 {
            return bad("at least one mask head is required".into());
        }
        if self.base_channels == 0 || self.decoder_channels == 0 || self.corrective_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.corrective_factor == 0 || self.patch_size % self.corrective_factor != 0 {
            return bad(format!(
                "corrective factor {} must divide the patch size {}",
                self.corrective_factor, self.patch_size
            ));
        }
        if !(self.fourier_scale.is_finite() && self.fourier_scale > 0.0) {
            return bad("fourier_scale must be positive".into());
        }
        Ok(())
    }
}
