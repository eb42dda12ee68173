use serde::{Deserialize, Serialize};

use super::ModelError;

/// Compression ratios supported for compact memory formation.
pub const BETA_SET: [usize; 5] = [4, 8, 16, 32, 64];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    /// Memory context window length l (raw tokens per window).
    pub window_l: usize,
    /// Memory tokens per window k; also the number of learned memory slots.
    pub mem_k: usize,
    /// Maximum raw-token positions for light (full-KV) processing.
    pub max_seq: usize,
    pub mem_enabled: bool,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn beta(&self) -> usize {
        self.window_l / self.mem_k
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(ModelError::Config("zero-sized model dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.mem_enabled {
            if self.mem_k == 0 || self.mem_k > self.window_l {
                return Err(ModelError::Config(format!(
                    "mem_k {} must be in [1, window_l {}]",
                    self.mem_k, self.window_l
                )));
            }
            if self.window_l % self.mem_k != 0 {
                return Err(ModelError::Config(format!(
                    "window_l {} not divisible by mem_k {}",
                    self.window_l, self.mem_k
                )));
            }
        }
        Ok(())
    }
}

/// Rejects compression ratios outside the supported set.
pub fn validate_beta(beta: usize) -> Result<(), ModelError> {
    if BETA_SET.contains(&beta) {
        Ok(())
    } else {
        Err(ModelError::Config(format!(
            "compression ratio {beta} not in allowed set {BETA_SET:?}"
        )))
    }
}
