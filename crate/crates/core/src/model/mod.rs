//! The velocity network and its adaptation mechanisms.

mod config;
mod dit;
mod lora;
mod patchify;
mod prompt;
mod rope;

pub use config::ModelConfig;
pub use dit::{
    timestep_embedding, weight_shapes, AttentionScores, BaseWeights, Binding, Dit, ForwardOutput, LayerAttention,
    TuningMode, VelocityInput,
};
pub use lora::{lora_apply, lora_merge, lora_sites, LoraAdapter, LoraPair, MergedAdapter, SITE_KINDS};
pub use patchify::{grid_positions, patchify, unpatchify, Patches, TokenPos};
pub use prompt::{init_prompt_tokens, PromptTokens};
pub use rope::{rope_angles, rope_apply, rope_tables};
