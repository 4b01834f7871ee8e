use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Hidden width of the dense encoder FFNs.
    pub ffn_hidden: usize,
    pub moe_experts: usize,
    pub moe_top_k: usize,
    /// Hidden width of each decoder expert FFN.
    pub expert_hidden: usize,
    pub codebook_size: usize,
    pub codebook_levels: usize,
    /// Number of history items fed to the encoder (the most recent ones).
    pub max_history: usize,
    pub session_size: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn_hidden: 128,
            moe_experts: 8,
            moe_top_k: 2,
            expert_hidden: 64,
            codebook_size: 64,
            codebook_levels: 3,
            max_history: 16,
            session_size: 5,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// `L·K` semantic tokens plus BOS.
    pub fn vocab_size(&self) -> usize {
        self.codebook_levels * self.codebook_size + 1
    }

    pub fn bos(&self) -> usize {
        self.codebook_levels * self.codebook_size
    }

    pub fn decoder_len(&self) -> usize {
        self.session_size * (self.codebook_levels + 1)
    }

    pub fn encoder_positions(&self) -> usize {
        (self.max_history * self.codebook_levels).max(1)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.moe_top_k == 0 || self.moe_top_k > self.moe_experts {
            return bad(format!("need 1 <= moe_top_k ({}) <= moe_experts ({})", self.moe_top_k, self.moe_experts));
        }
        if self.codebook_size == 0 || self.codebook_levels == 0 || self.session_size == 0 {
            return bad("codebook size, levels and session size must be positive".into());
        }
        if self.ffn_hidden == 0 || self.expert_hidden == 0 || self.decoder_layers == 0 {
            return bad("hidden widths and decoder depth must be positive".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }
}
