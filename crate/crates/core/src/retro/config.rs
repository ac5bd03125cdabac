use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Neighbors retrieved per chunk in the full-scale setup.
pub const FULL_SCALE_K_NEIGHBORS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetroConfig {
    pub base: ModelConfig,
    /// Decoder chunk length `m` in tokens.
    pub chunk_size: usize,
    pub k_neighbors: usize,
    /// Tokens kept per retrieved neighbor (longer neighbors are truncated).
    pub neighbor_len: usize,
    pub encoder_layers: usize,
    /// Decoder layers that carry chunked cross-attention.
    pub cca_layers: Vec<usize>,
    /// Initial value of every CCA gate.
    #[serde(default)]
    pub gate_init: f64,
}

impl RetroConfig {
    /// CCA on every third decoder layer starting at layer 1 (layer 0 when
    /// the decoder has a single layer).
    pub fn new(base: ModelConfig, chunk_size: usize, k_neighbors: usize, neighbor_len: usize) -> Self {
        let cca_layers = default_cca_layers(base.n_layers);
        Self {
            base,
            chunk_size,
            k_neighbors,
            neighbor_len,
            encoder_layers: 1,
            cca_layers,
            gate_init: 0.0,
        }
    }

    pub fn with_encoder_layers(mut self, n: usize) -> Self {
        self.encoder_layers = n;
        self
    }

    pub fn with_cca_layers(mut self, layers: Vec<usize>) -> Self {
        self.cca_layers = layers;
        self
    }

    /// Nonzero gates let the cross-attention weights learn from the first
    /// step when the whole model is trained from scratch. With a zero gate
    /// their gradient vanishes and the gate's own gradient has no consistent
    /// sign, so neither moves.
    pub fn with_gate_init(mut self, value: f64) -> Self {
        self.gate_init = value;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.chunk_size == 0 {
            return bad("chunk_size must be at least 1".into());
        }
        if self.neighbor_len == 0 || self.neighbor_len > self.base.max_seq_len {
            return bad(format!(
                "neighbor_len must be in 1..={}",
                self.base.max_seq_len
            ));
        }
        if !self.gate_init.is_finite() {
            return bad("gate_init must be finite".into());
        }
        if self.encoder_layers == 0 {
            return bad("encoder_layers must be at least 1".into());
        }
        if let Some(l) = self.cca_layers.iter().find(|&&l| l >= self.base.n_layers) {
            return bad(format!("cca layer {l} is not a decoder layer"));
        }
        Ok(())
    }
}

pub fn default_cca_layers(n_layers: usize) -> Vec<usize> {
    if n_layers == 1 {
        vec![0]
    } else {
        (1..n_layers).step_by(3).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Neighbor {
    pub tokens: Vec<usize>,
    /// Index-wide id of the retrieved chunk.
    pub source: usize,
}

/// Neighbors for each decoder chunk, in rank order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborBatch {
    pub chunks: Vec<Vec<Neighbor>>,
}

impl NeighborBatch {
    pub fn empty(n_chunks: usize) -> Self {
        Self {
            chunks: vec![Vec::new(); n_chunks],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.iter().all(Vec::is_empty)
    }

    pub fn validate(&self, cfg: &RetroConfig) -> Result<()> {
        for (u, c) in self.chunks.iter().enumerate() {
            if c.len() > cfg.k_neighbors {
                return Err(Error::Config(format!(
                    "chunk {u} has {} neighbors, k_neighbors is {}",
                    c.len(),
                    cfg.k_neighbors
                )));
            }
            for n in c {
                if n.tokens.is_empty() {
                    return Err(Error::Config(format!("chunk {u} has an empty neighbor")));
                }
                if let Some(&id) = n.tokens.iter().find(|&&id| id >= cfg.base.vocab_size) {
                    return Err(Error::TokenOutOfRange {
                        id,
                        vocab: cfg.base.vocab_size,
                    });
                }
            }
        }
        Ok(())
    }
}
