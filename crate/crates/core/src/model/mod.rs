//! Extractor, predictor and the masking functions that connect them.

mod config;
mod encoder;
mod masking;
mod rationale;

pub use config::{Granularity, MaskingMode, ModelConfig};
pub use encoder::{Encoder, Linear};
pub use masking::{
    aggregate_sentences, enforce_special, gumbel_mask, mask_importance, mask_substitute,
    sample_gumbel, straight_through, GumbelNoise, MaskNodes, RationaleMask,
};
pub use rationale::{argmax, Forward, ModelMeta, Probe, RationaleModel};
