use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub precision: Precision,
}

impl ModelConfig {
    pub fn tiny(vocab_size: usize, max_len: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_len,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
            precision: Precision::F64,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.max_len == 0 || self.d_model == 0 {
            return bad("vocab_size, max_len and d_model must be positive".into());
        }
        if self.n_layers > 0 {
            if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
                return bad(format!(
                    "d_model ({}) must be divisible by n_heads ({})",
                    self.d_model, self.n_heads
                ));
            }
            if self.head_dim() % 2 != 0 {
                return bad(format!("head dimension {} must be even for rotary encoding", self.head_dim()));
            }
            if self.d_ff == 0 {
                return bad("d_ff must be positive".into());
            }
        }
        if !(self.rope_base > 1.0) || !(self.norm_eps > 0.0) {
            return bad("rope_base must exceed 1 and norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 4 * d * d + 2 * d * self.d_ff;
        self.vocab_size * d + self.max_len * d + self.n_layers * per_layer + d
    }
}

/// Weights and switches applied when turning the two losses into the
/// training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub ar_weight: f64,
    pub nar_weight: f64,
    /// Divide the objective by the number of supervised positions.
    pub normalize: bool,
    /// Fault injection: negates the denoising term. Used to check that the
    /// verification suite notices a broken objective.
    pub flip_dce_sign: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            ar_weight: 1.0,
            nar_weight: 1.0,
            normalize: false,
            flip_dce_sign: false,
        }
    }
}
