use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    pub attention_heads: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    /// Octave frequencies per coordinate in the Fourier positional encoding.
    pub fourier_freqs: usize,
    /// Farthest point sampling seed index for teacher position queries.
    pub fps_start: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// CPU-sized network.
    pub fn desk() -> Self {
        ModelConfig {
            feature_dim: 32,
            decoder_layers: 2,
            num_queries: 16,
            attention_heads: 4,
            ffn_dim: 64,
            num_classes: 6,
            fourier_freqs: 8,
            fps_start: 0,
        }
    }

    /// Dimensions of the published full-scale decoder.
    pub fn full_scale() -> Self {
        ModelConfig {
            feature_dim: 256,
            decoder_layers: 6,
            num_queries: 400,
            attention_heads: 8,
            ffn_dim: 1024,
            num_classes: 18,
            ..Self::desk()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.feature_dim / self.attention_heads
    }

    pub fn fourier_width(&self) -> usize {
        2 * 3 * self.fourier_freqs
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.feature_dim == 0 || self.attention_heads == 0 {
            return bad("feature_dim and attention_heads must be positive".into());
        }
        if self.feature_dim % self.attention_heads != 0 {
            return bad(format!(
                "feature_dim {} not divisible by {} heads",
                self.feature_dim, self.attention_heads
            ));
        }
        if self.decoder_layers == 0 {
            return bad("decoder_layers must be at least 1".into());
        }
        if self.num_queries == 0 || self.ffn_dim == 0 || self.num_classes == 0 || self.fourier_freqs == 0 {
            return bad("num_queries, ffn_dim, num_classes and fourier_freqs must be positive".into());
        }
        if self.fourier_freqs > 30 {
            return bad("fourier_freqs above 30 overflow the octave scale".into());
        }
        Ok(())
    }
}
