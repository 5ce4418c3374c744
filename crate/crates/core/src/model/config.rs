use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Architecture of the velocity transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Pixels per token edge.
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Channels of one image (3 for RGB).
    pub image_channels: usize,
    /// Channels of the model input `[z_t; ẑ₀; M]`, always `2·image_channels + 1`.
    pub in_channels: usize,
    /// Feed-forward width as a multiple of `hidden_dim`.
    pub mlp_ratio: usize,
    pub token_vocab_size: usize,
    pub num_prompt_tokens: usize,
    pub lora_rank: usize,
    pub lora_scale: f32,
    pub rope_base: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            hidden_dim: 128,
            num_layers: 4,
            num_heads: 4,
            image_channels: 3,
            in_channels: 7,
            mlp_ratio: 4,
            token_vocab_size: 64,
            num_prompt_tokens: 50,
            lora_rank: 8,
            lora_scale: 1.0,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.patch_size >= 1, "patch_size must be at least 1");
        ensure!(self.num_heads >= 1 && self.num_layers >= 1, "need at least one head and one layer");
        ensure!(
            self.hidden_dim % (2 * self.num_heads) == 0,
            "hidden_dim {} must be divisible by 2·num_heads = {}",
            self.hidden_dim,
            2 * self.num_heads
        );
        ensure!(self.head_dim() >= 4, "head_dim {} leaves no rotary pair per axis", self.head_dim());
        ensure!(self.image_channels >= 1, "image_channels must be at least 1");
        ensure!(
            self.in_channels == 2 * self.image_channels + 1,
            "in_channels {} must equal 2·image_channels + 1 = {}",
            self.in_channels,
            2 * self.image_channels + 1
        );
        ensure!(self.mlp_ratio >= 1, "mlp_ratio must be at least 1");
        ensure!(self.token_vocab_size >= 1, "token vocabulary is empty");
        ensure!(self.num_prompt_tokens >= 1, "num_prompt_tokens must be at least 1");
        ensure!(
            self.lora_rank >= 1 && self.lora_rank <= self.hidden_dim,
            "lora_rank {} outside 1..={}",
            self.lora_rank,
            self.hidden_dim
        );
        ensure!(self.lora_scale.is_finite(), "lora_scale must be finite");
        ensure!(self.rope_base.is_finite() && self.rope_base > 1.0, "rope_base must exceed 1");
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn ff_dim(&self) -> usize {
        self.hidden_dim * self.mlp_ratio
    }

    /// Width of one patch feature: `z_t` and `ẑ₀` pixels plus the pooled mask.
    pub fn patch_in_dim(&self) -> usize {
        2 * self.patch_size * self.patch_size * self.image_channels + 1
    }

    /// Width of one output patch (velocity pixels).
    pub fn patch_out_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image_channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn heads_must_split_hidden_into_pairs() {
        let cfg = ModelConfig {
            hidden_dim: 12,
            num_heads: 4,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn in_channels_follow_image_channels() {
        let cfg = ModelConfig {
            in_channels: 6,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
