use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

/// Where layer normalization sits relative to each residual sub-layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `x + f(norm(x))`, with a final norm after the stack.
    Pre,
    /// `norm(x + f(x))`.
    Post,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub beam_size: usize,
    pub activation: Activation,
    pub norm: NormPlacement,
    pub layer_norm_eps: f64,
    /// Output logits reuse the token embedding table instead of a separate
    /// projection matrix.
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 4,
            decoder_layers: 4,
            heads: 4,
            model_dim: 64,
            ffn_dim: 256,
            vocab_size: 256,
            max_seq_len: 96,
            dropout: 0.1,
            beam_size: 5,
            activation: Activation::Gelu,
            norm: NormPlacement::Pre,
            layer_norm_eps: 1e-5,
            tie_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.heads > 0 && self.model_dim.is_multiple_of(self.heads),
            Validation,
            "model_dim {} is not divisible by heads {}",
            self.model_dim,
            self.heads
        );
        ensure!(
            self.encoder_layers > 0 && self.decoder_layers > 0,
            Validation,
            "encoder_layers and decoder_layers must be positive"
        );
        ensure!(self.ffn_dim > 0, Validation, "ffn_dim must be positive");
        ensure!(
            self.vocab_size > super::FIRST_FREE_ID,
            Validation,
            "vocab_size {} leaves no room beyond the special tokens",
            self.vocab_size
        );
        ensure!(
            self.max_seq_len >= 2,
            Validation,
            "max_seq_len must be at least 2"
        );
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            Validation,
            "dropout {} outside [0, 1)",
            self.dropout
        );
        ensure!(self.beam_size >= 1, Validation, "beam_size must be >= 1");
        ensure!(
            self.layer_norm_eps > 0.0,
            Validation,
            "layer_norm_eps must be positive"
        );
        Ok(())
    }
}
