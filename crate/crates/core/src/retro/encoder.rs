use crate::autodiff::Var;
use crate::error::Result;
use crate::model::layers::{attention, layer_norm, mask_from, mlp};
use crate::model::Graph;

use super::{NeighborBatch, RetroConfig};

/// Rows of the stacked encoder output belonging to one neighbor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub chunk: usize,
    pub neighbor: usize,
    pub start: usize,
    pub len: usize,
}

/// Encoder output for every neighbor of every chunk, stacked row-wise into a
/// single `[Σ len × d]` matrix.
#[derive(Clone, Debug)]
pub struct EncodedNeighbors {
    pub var: Var,
    pub segments: Vec<Segment>,
    pub n_chunks: usize,
}

impl EncodedNeighbors {
    /// Row indices holding the neighbors of chunk `u`.
    pub fn chunk_rows(&self, u: usize) -> impl Iterator<Item = usize> + '_ {
        self.segments
            .iter()
            .filter(move |s| s.chunk == u)
            .flat_map(|s| s.start..s.start + s.len)
    }

    pub fn has_chunk(&self, u: usize) -> bool {
        self.segments.iter().any(|s| s.chunk == u)
    }

    pub fn total_rows(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    /// `[chunks, k, r, d]` when every chunk has `k` neighbors of equal length `r`.
    pub fn uniform_dims(&self, d: usize) -> Option<[usize; 4]> {
        let first = self.segments.first()?;
        let k = self.segments.iter().filter(|s| s.chunk == first.chunk).count();
        let uniform = (0..self.n_chunks).all(|u| {
            self.segments.iter().filter(|s| s.chunk == u).count() == k
        }) && self.segments.iter().all(|s| s.len == first.len);
        uniform.then_some([self.n_chunks, k, first.len, d])
    }
}

/// Bidirectional encoder over each neighbor. Neighbor tokens also
/// cross-attend to the `m` hidden rows of the chunk that retrieved them.
///
/// Neighbors share the decoder's token and position embeddings and are
/// truncated to `neighbor_len`. Returns `None` when no chunk has neighbors.
pub fn encode_neighbors(
    g: &mut Graph,
    cfg: &RetroConfig,
    neighbors: &NeighborBatch,
    chunk_hidden: Var,
) -> Result<Option<EncodedNeighbors>> {
    let m = cfg.chunk_size;
    let t = g.tape.shape(chunk_hidden)[0];
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::new();
    for (u, list) in neighbors.chunks.iter().enumerate() {
        for (j, n) in list.iter().enumerate() {
            let len = n.tokens.len().min(cfg.neighbor_len);
            segments.push(Segment {
                chunk: u,
                neighbor: j,
                start: tokens.len(),
                len,
            });
            tokens.extend_from_slice(&n.tokens[..len]);
            positions.extend(0..len);
        }
    }
    if tokens.is_empty() {
        return Ok(None);
    }
    let n = tokens.len();
    let mut owner = vec![0usize; n];
    let mut chunk_of = vec![0usize; n];
    for (si, s) in segments.iter().enumerate() {
        for r in s.start..s.start + s.len {
            owner[r] = si;
            chunk_of[r] = s.chunk;
        }
    }
    let self_mask = mask_from(n, n, |i, j| owner[i] == owner[j]);
    let cross_mask = mask_from(n, t, |i, j| j / m == chunk_of[i]);
    let self_mask = g.tape.constant(self_mask);
    let cross_mask = g.tape.constant(cross_mask);

    let table = g.p("tok_emb")?;
    let pos = g.p("pos_emb")?;
    let e = g.tape.embedding(table, &tokens)?;
    let p = g.tape.gather_rows(pos, &positions)?;
    let mut x = g.tape.add(e, p)?;
    let heads = cfg.base.n_heads;
    let eps = cfg.base.ln_eps;
    for l in 0..cfg.encoder_layers {
        let pre = format!("enc.{l}");
        let h = layer_norm(g, x, &format!("{pre}.ln1"), eps)?;
        let a = attention(g, h, h, &format!("{pre}.attn"), heads, Some(self_mask))?;
        x = g.tape.add(x, a)?;
        let h = layer_norm(g, x, &format!("{pre}.xln"), eps)?;
        let a = attention(g, h, chunk_hidden, &format!("{pre}.xattn"), heads, Some(cross_mask))?;
        x = g.tape.add(x, a)?;
        let h = layer_norm(g, x, &format!("{pre}.ln2"), eps)?;
        let f = mlp(g, h, &format!("{pre}.mlp"))?;
        x = g.tape.add(x, f)?;
    }
    let out = layer_norm(g, x, "enc.ln_f", eps)?;
    Ok(Some(EncodedNeighbors {
        var: out,
        segments,
        n_chunks: neighbors.chunks.len(),
    }))
}
