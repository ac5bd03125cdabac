use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoder-only transformer hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    /// Hidden width of the feed-forward block is `ffn_mult * d_model`.
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    /// Always 0.0; kept so serialized configs state it explicitly.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_ffn_mult() -> usize {
    4
}

fn default_ln_eps() -> f64 {
    1e-5
}

/// Sequence length used by the full-scale runs this lab mirrors.
pub const FULL_SCALE_MAX_SEQ_LEN: usize = 1024;

impl ModelConfig {
    pub fn new(vocab_size: usize, d_model: usize, n_heads: usize, n_layers: usize) -> Self {
        Self {
            vocab_size,
            d_model,
            n_heads,
            n_layers,
            max_seq_len: 128,
            ffn_mult: default_ffn_mult(),
            dropout: 0.0,
            ln_eps: default_ln_eps(),
        }
    }

    pub fn with_max_seq_len(mut self, max_seq_len: usize) -> Self {
        self.max_seq_len = max_seq_len;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.ffn_mult == 0 {
            return bad("vocab_size, d_model, n_heads and ffn_mult must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be at least 1");
        }
        if self.dropout != 0.0 {
            return bad("dropout is fixed at 0.0");
        }
        if !(self.ln_eps >= 0.0) {
            return bad("ln_eps must be non-negative");
        }
        Ok(())
    }
}

/// Toy size ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum SizePreset {
    Xs,
    S,
    M,
}

impl SizePreset {
    pub const ALL: [SizePreset; 3] = [SizePreset::Xs, SizePreset::S, SizePreset::M];

    pub fn config(self, vocab_size: usize, max_seq_len: usize) -> ModelConfig {
        let (d, h, l) = match self {
            SizePreset::Xs => (32, 4, 2),
            SizePreset::S => (64, 4, 4),
            SizePreset::M => (128, 8, 6),
        };
        ModelConfig::new(vocab_size, d, h, l).with_max_seq_len(max_seq_len)
    }

    pub fn name(self) -> &'static str {
        match self {
            SizePreset::Xs => "xs",
            SizePreset::S => "s",
            SizePreset::M => "m",
        }
    }
}

impl std::str::FromStr for SizePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xs" => Ok(SizePreset::Xs),
            "s" => Ok(SizePreset::S),
            "m" => Ok(SizePreset::M),
            other => Err(Error::Config(format!("unknown size preset `{other}`"))),
        }
    }
}
