use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return fail("d_model, n_heads and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len < 2 {
            return fail(format!(
                "max_seq_len must be >= 2, got {}",
                self.max_seq_len
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        let (v, d, f, s) = (self.vocab_size, self.d_model, self.d_ff, self.max_seq_len);
        let per_layer =
            2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        v * d + s * d + self.n_layers * per_layer + 2 * d + d * v + v
    }
}
