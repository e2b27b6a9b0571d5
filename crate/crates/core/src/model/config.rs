use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl Default for ModelConfig {
    /// The desk-scale configuration: 2 layers, width 64, 4 query heads
    /// sharing 2 key/value heads.
    fn default() -> Self {
        Self {
            vocab_size: tokenizer::VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 176,
            max_seq_len: 512,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Query heads per key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return fail("vocab_size, d_model, n_layers and d_ff must be positive".into());
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 {
            return fail("head counts must be positive".into());
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_heads {} is not a multiple of n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head_dim {} must be even for rotary encoding", self.head_dim()));
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive".into());
        }
        if !(self.rope_base > 1.0 && self.rope_base.is_finite()) {
            return fail(format!("rope_base {} must be > 1", self.rope_base));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return fail(format!("norm_eps {} must be positive", self.norm_eps));
        }
        Ok(())
    }
}
