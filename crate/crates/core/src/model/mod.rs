//! Transformer building blocks, the plain decoder baseline and the [`Model`]
//! container shared by both architectures.

pub mod checkpoint;
mod config;
mod decode;
mod gradcheck;
pub(crate) mod gpt;
pub mod layers;
mod params;

pub use config::{ModelConfig, SizePreset, FULL_SCALE_MAX_SEQ_LEN};
pub use decode::{argmax_lowest, greedy_decode, ChunkRetriever, DecodeOptions};
pub use gradcheck::{check_param_gradients, ParamGradReport};
pub use gpt::{gpt_forward, init_decoder_params};
pub use params::{Graph, Grads, Param, ParamKind, ParameterSet};
pub(crate) use decode::chunk_tokens;
pub(crate) use params::normal_tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::peft::{self, PeftConfig};
use crate::retro::{self, NeighborBatch, RetroConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Gpt(ModelConfig),
    Retro(RetroConfig),
}

impl Architecture {
    pub fn base(&self) -> &ModelConfig {
        match self {
            Architecture::Gpt(c) => c,
            Architecture::Retro(r) => &r.base,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Gpt(_) => "gpt",
            Architecture::Retro(_) => "retro",
        }
    }

    pub fn retro(&self) -> Option<&RetroConfig> {
        match self {
            Architecture::Retro(r) => Some(r),
            Architecture::Gpt(_) => None,
        }
    }
}

/// One decoder input. `virtual_at` is where prompt-encoder rows are spliced
/// in when the model carries P-tuning; it is ignored otherwise.
#[derive(Clone, Copy, Debug)]
pub struct DecoderInput<'a> {
    pub tokens: &'a [usize],
    pub virtual_at: usize,
    pub neighbors: Option<&'a NeighborBatch>,
}

impl<'a> DecoderInput<'a> {
    pub fn plain(tokens: &'a [usize]) -> Self {
        Self {
            tokens,
            virtual_at: 0,
            neighbors: None,
        }
    }
}

/// Architecture, parameters and the (optional) injected PEFT method.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParameterSet,
    pub peft: Option<PeftConfig>,
}

impl Model {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        match &arch {
            Architecture::Gpt(c) => init_decoder_params(c, &mut rng, &mut params)?,
            Architecture::Retro(r) => retro::init_retro_params(r, &mut rng, &mut params)?,
        }
        Ok(Self {
            arch,
            params,
            peft: None,
        })
    }

    pub fn gpt(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(Architecture::Gpt(cfg), seed)
    }

    pub fn retro(cfg: RetroConfig, seed: u64) -> Result<Self> {
        Self::new(Architecture::Retro(cfg), seed)
    }

    pub fn config(&self) -> &ModelConfig {
        self.arch.base()
    }

    pub fn n_virtual(&self) -> usize {
        match &self.peft {
            Some(PeftConfig::Ptuning(p)) => p.n_virtual,
            _ => 0,
        }
    }

    /// Chunk size for retrieval-enhanced models, 1 otherwise.
    pub fn chunk_size(&self) -> usize {
        self.arch.retro().map_or(1, |r| r.chunk_size)
    }

    /// Records a forward pass; returns the graph and the `[T × vocab]` logits.
    pub fn forward(&self, input: &DecoderInput<'_>) -> Result<(Graph, Var)> {
        let mut g = Graph::new(&self.params);
        if let Some(PeftConfig::Lora(l)) = &self.peft {
            g.lora_scale = l.scale();
        }
        let virt = peft::ptuning::virtual_embeddings(&mut g)?;
        let logits = match &self.arch {
            Architecture::Gpt(cfg) => {
                if input.neighbors.is_some_and(|n| !n.is_empty()) {
                    return Err(Error::Config("plain decoder does not take neighbors".into()));
                }
                let x = gpt::embed_decoder(&mut g, cfg, input.tokens, input.virtual_at, virt)?;
                let x = gpt::decoder_stack(&mut g, cfg, x, &mut |_, _, x| Ok(x))?;
                gpt::lm_head(&mut g, cfg, x)?
            }
            Architecture::Retro(cfg) => retro::retro_forward_graph(
                &mut g,
                cfg,
                input.tokens,
                input.virtual_at,
                virt,
                input.neighbors,
            )?,
        };
        Ok((g, logits))
    }

    /// Mean next-token cross-entropy over positions with a target. `targets`
    /// covers every decoder position, virtual rows included.
    pub fn loss(&self, input: &DecoderInput<'_>, targets: &[Option<usize>]) -> Result<(Graph, Var)> {
        let (mut g, logits) = self.forward(input)?;
        let loss = g.tape.cross_entropy(logits, targets)?;
        Ok((g, loss))
    }

    pub fn logits(&self, input: &DecoderInput<'_>) -> Result<Tensor> {
        let (g, logits) = self.forward(input)?;
        Ok(g.tape.value(logits).clone())
    }

    /// Sets every CCA gate to `value` (no-op for the plain decoder).
    pub fn set_cca_gates(&mut self, value: f64) -> Result<()> {
        if let Architecture::Retro(r) = &self.arch {
            for &l in &r.cca_layers {
                let p = self.params.get_mut(&retro::gate_path(l))?;
                p.tensor.data_mut()[0] = value;
            }
        }
        Ok(())
    }

    /// Decoder-only parameters of a retrieval-enhanced model.
    pub fn backbone_params(&self) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (k, p) in self.params.iter() {
            let retro_only = k.starts_with("enc.") || k.contains(".cca");
            if p.kind == ParamKind::Base && !retro_only {
                out.insert(k.clone(), p.tensor.clone(), ParamKind::Base)
                    .expect("paths are unique");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests;
