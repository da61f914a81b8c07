use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the desk-scale network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    /// Side of the square image patch, in pixels.
    pub patch_size: usize,
    pub n_visual_tokens: usize,
    pub d_vision: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 512,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq: 256,
            patch_size: 4,
            n_visual_tokens: 4,
            d_vision: 32,
            lora_rank: 8,
            lora_alpha: 16.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size < crate::data::N_RESERVED {
            return bad(format!(
                "vocab_size {} smaller than the reserved id block",
                self.vocab_size
            ));
        }
        if self.d_model == 0 || self.n_heads == 0 {
            return bad("d_model and n_heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model not divisible by n_heads ({} % {} != 0)",
                self.d_model, self.n_heads
            ));
        }
        if self.n_visual_tokens < 1 {
            return bad("n_visual_tokens must be >= 1".into());
        }
        if self.lora_rank < 1 {
            return bad("lora_rank must be >= 1".into());
        }
        if self.max_seq < self.n_visual_tokens + 1 {
            return bad(format!(
                "max_seq {} must exceed n_visual_tokens {}",
                self.max_seq, self.n_visual_tokens
            ));
        }
        if self.patch_size == 0 || self.d_vision == 0 {
            return bad("patch_size and d_vision must be positive".into());
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return bad("lora_alpha must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `alpha / r`, the factor on every adapter update.
    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
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
    fn indivisible_heads_rejected() {
        let c = ModelConfig {
            d_model: 8,
            n_heads: 3,
            ..ModelConfig::default()
        };
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("d_model not divisible"), "{e}");
    }

    #[test]
    fn short_max_seq_rejected() {
        let c = ModelConfig {
            max_seq: 4,
            n_visual_tokens: 4,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
