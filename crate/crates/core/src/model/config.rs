use serde::{Deserialize, Serialize};

/// How the predicted mask is applied to predictor input embeddings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMode {
    /// Interpolate towards the `[MASK]` embedding.
    #[default]
    Substitute,
    /// Add rationale / non-rationale tag embeddings; nothing is occluded.
    Importance,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Token,
    Sentence,
}

/// Encoder dimensions and mask-generation settings, saved next to checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Gumbel-softmax temperature.
    pub temperature: f64,
    /// Feed hard 0/1 masks forward while back-propagating through the soft mask.
    pub straight_through: bool,
    pub masking: MaskingMode,
    pub granularity: Granularity,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 2,
            layers: 2,
            d_ff: 128,
            max_seq_len: 128,
            temperature: 1.0,
            straight_through: false,
            masking: MaskingMode::Substitute,
            granularity: Granularity::Token,
            init_seed: 0,
        }
    }
}
