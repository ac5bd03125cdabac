use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::layers::{attention, layer_norm, mask_from};
use crate::model::Graph;

use super::{gate_path, EncodedNeighbors, RetroConfig};

/// Decoder positions that attend to the neighbors of chunk `u`, clipped to `t`.
pub fn attending_rows(u: usize, m: usize, t: usize) -> std::ops::Range<usize> {
    let start = u * m + m - 1;
    let end = (start + m).min(t);
    start.min(end)..end
}

/// Gated chunked cross-attention residual for decoder layer `layer`.
///
/// Positions not covered by any chunk with neighbors are returned bit-for-bit.
pub fn chunked_cross_attention(
    g: &mut Graph,
    cfg: &RetroConfig,
    layer: usize,
    hidden: Var,
    encoded: Option<&EncodedNeighbors>,
    n_chunks: usize,
) -> Result<Var> {
    let m = cfg.chunk_size;
    let t = g.tape.shape(hidden)[0];
    if t % m != 0 {
        return Err(Error::NotChunkAligned { len: t, chunk: m });
    }
    if t / m != n_chunks {
        return Err(Error::MisalignedNeighbors {
            expected: t / m,
            got: n_chunks,
        });
    }
    let Some(enc) = encoded else {
        return Ok(hidden);
    };
    if enc.n_chunks != n_chunks {
        return Err(Error::MisalignedNeighbors {
            expected: n_chunks,
            got: enc.n_chunks,
        });
    }

    let mut rows = Vec::new();
    let mut row_chunk = Vec::new();
    for u in 0..n_chunks {
        if !enc.has_chunk(u) {
            continue;
        }
        for r in attending_rows(u, m, t) {
            rows.push(r);
            row_chunk.push(u);
        }
    }
    if rows.is_empty() {
        return Ok(hidden);
    }
    let n = enc.total_rows();
    let mut key_chunk = vec![0usize; n];
    for s in &enc.segments {
        key_chunk[s.start..s.start + s.len].fill(s.chunk);
    }
    let mask = mask_from(rows.len(), n, |i, j| key_chunk[j] == row_chunk[i]);
    let mask = g.tape.constant(mask);

    let prefix = format!("dec.{layer}");
    let q = g.tape.gather_rows(hidden, &rows)?;
    let q = layer_norm(g, q, &format!("{prefix}.cca_ln"), cfg.base.ln_eps)?;
    let out = attention(g, q, enc.var, &format!("{prefix}.cca"), cfg.base.n_heads, Some(mask))?;
    let gate = g.p(&gate_path(layer))?;
    let gated = g.tape.scale_by(out, gate)?;
    Ok(g.tape.scatter_add_rows(hidden, gated, &rows)?)
}
