//! Retrieval-enhanced decoder: a bidirectional neighbor encoder plus chunked
//! cross-attention (CCA) inserted into selected decoder layers.
//!
//! Alignment: the decoder input of length `T` is split into `T/m` chunks. The
//! neighbors retrieved for chunk `u` are visible to positions
//! `u·m + m − 1 ..= u·m + 2m − 2`, i.e. from the last token of chunk `u`
//! through the second-to-last token of chunk `u + 1`. Positions
//! `0..m − 1` therefore never see retrieved content, and no position sees
//! neighbors retrieved from text after it. Each CCA residual is multiplied by
//! a learned scalar gate, initialised to zero unless configured otherwise.

mod cca;
mod config;
mod encoder;

pub use cca::{attending_rows, chunked_cross_attention};
pub use config::{NeighborBatch, Neighbor, RetroConfig, FULL_SCALE_K_NEIGHBORS};
pub use encoder::{encode_neighbors, EncodedNeighbors, Segment};

use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::model::gpt::{
    decoder_stack, embed_decoder, init_decoder_params, insert_attention, insert_ln, insert_mlp,
    lm_head, residual_std,
};
use crate::model::{Graph, ParamKind, ParameterSet};

/// Adds encoder and CCA parameters on top of the decoder parameters.
pub fn init_retro_params<R: Rng + ?Sized>(
    cfg: &RetroConfig,
    rng: &mut R,
    params: &mut ParameterSet,
) -> Result<()> {
    cfg.validate()?;
    init_decoder_params(&cfg.base, rng, params)?;
    let d = cfg.base.d_model;
    let f = cfg.base.ffn_dim();
    let enc_blocks = 3 * cfg.encoder_layers;
    for l in 0..cfg.encoder_layers {
        let p = format!("enc.{l}");
        insert_ln(params, &format!("{p}.ln1"), d)?;
        insert_attention(params, rng, &format!("{p}.attn"), d, residual_std(d, enc_blocks))?;
        insert_ln(params, &format!("{p}.xln"), d)?;
        insert_attention(params, rng, &format!("{p}.xattn"), d, residual_std(d, enc_blocks))?;
        insert_ln(params, &format!("{p}.ln2"), d)?;
        insert_mlp(params, rng, &format!("{p}.mlp"), d, f, residual_std(f, enc_blocks))?;
    }
    insert_ln(params, "enc.ln_f", d)?;
    for &l in &cfg.cca_layers {
        let p = format!("dec.{l}");
        insert_ln(params, &format!("{p}.cca_ln"), d)?;
        insert_attention(params, rng, &format!("{p}.cca"), d, residual_std(d, cfg.base.n_layers))?;
        params.insert(
            format!("{p}.cca_gate"),
            Tensor::new(vec![1], vec![cfg.gate_init])?,
            ParamKind::Base,
        )?;
    }
    Ok(())
}

pub fn gate_path(layer: usize) -> String {
    format!("dec.{layer}.cca_gate")
}

/// Full retrieval-enhanced forward on an already bound graph.
///
/// `tokens` must be chunk aligned once `virtual_emb` rows are spliced in at
/// `virtual_at`.
pub(crate) fn retro_forward_graph(
    g: &mut Graph,
    cfg: &RetroConfig,
    tokens: &[usize],
    virtual_at: usize,
    virtual_emb: Option<Var>,
    neighbors: Option<&NeighborBatch>,
) -> Result<Var> {
    let n_virtual = virtual_emb.map_or(0, |v| g.tape.shape(v)[0]);
    let t = tokens.len() + n_virtual;
    let m = cfg.chunk_size;
    if t % m != 0 {
        return Err(Error::NotChunkAligned { len: t, chunk: m });
    }
    let n_chunks = t / m;
    let empty = NeighborBatch::empty(n_chunks);
    let neighbors = neighbors.unwrap_or(&empty);
    if neighbors.chunks.len() != n_chunks {
        return Err(Error::MisalignedNeighbors {
            expected: n_chunks,
            got: neighbors.chunks.len(),
        });
    }
    neighbors.validate(cfg)?;

    let x = embed_decoder(g, &cfg.base, tokens, virtual_at, virtual_emb)?;
    let mut encoded: Option<Option<EncodedNeighbors>> = None;
    let mut hook = |g: &mut Graph, layer: usize, x: Var| -> Result<Var> {
        if !cfg.cca_layers.contains(&layer) {
            return Ok(x);
        }
        if encoded.is_none() {
            encoded = Some(encode_neighbors(g, cfg, neighbors, x)?);
        }
        let enc = encoded.as_ref().and_then(Option::as_ref);
        chunked_cross_attention(g, cfg, layer, x, enc, n_chunks)
    };
    let x = decoder_stack(g, &cfg.base, x, &mut hook)?;
    lm_head(g, &cfg.base, x)
}

/// Retrieval-enhanced forward on a parameter set; returns `[T × vocab]` logits.
pub fn retro_forward(
    cfg: &RetroConfig,
    params: &ParameterSet,
    token_ids: &[usize],
    neighbors: &NeighborBatch,
) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let logits = retro_forward_graph(&mut g, cfg, token_ids, 0, None, Some(neighbors))?;
    Ok(g.tape.value(logits).clone())
}

/// Splits `token_ids` into consecutive chunks of exactly `m` tokens.
pub fn split_into_chunks(token_ids: &[usize], m: usize) -> Result<Vec<&[usize]>> {
    if m == 0 || token_ids.len() % m != 0 {
        return Err(Error::NotChunkAligned {
            len: token_ids.len(),
            chunk: m,
        });
    }
    Ok(token_ids.chunks(m).collect())
}

#[cfg(test)]
mod tests;
