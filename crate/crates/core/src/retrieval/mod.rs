//! Chunking, hashed bag-of-words dual encoder, brute-force dot-product
//! retrieval, and assembly of retrieved text for both decoder kinds.

mod chunk;
mod encoder;
mod index;
mod prompt;
mod tokenizer;

pub use chunk::{chunk_document, chunk_document_with, TextChunk, CHUNK_WORDS};
pub use encoder::{
    collision_stats, fnv1a, normalize_word, CollisionStats, DualEncoder, HashedBow,
    DEFAULT_HASH_DIM,
};
pub use index::{rank_order, Chunk, Hit, RetrievalIndex};
pub use prompt::{assemble_gpt_prompt, question_line, Passage};
pub use tokenizer::{Tokenizer, EOS_ID, PAD_ID};

use crate::error::Result;
use crate::retro::{Neighbor, NeighborBatch};

/// Retrieval for one decoder chunk: the detokenized chunk is the query, and
/// the top `k` chunk texts come back tokenized and cut to `neighbor_len`.
/// A chunk with no text (padding or virtual rows only) or an empty index
/// yields no neighbors.
pub fn neighbors_for_chunk(
    index: &RetrievalIndex,
    encoder: &dyn DualEncoder,
    tokenizer: &Tokenizer,
    chunk: &[usize],
    k: usize,
    neighbor_len: usize,
) -> Result<Vec<Neighbor>> {
    let text = tokenizer.decode(chunk);
    if text.trim().is_empty() || index.is_empty() || k == 0 {
        return Ok(Vec::new());
    }
    let hits = index.query(encoder, &text, k)?;
    Ok(hits
        .iter()
        .filter_map(|h| index.chunk(h.id))
        .map(|c| {
            let mut tokens = tokenizer.encode(&c.text);
            tokens.truncate(neighbor_len);
            Neighbor {
                tokens,
                source: c.id,
            }
        })
        .filter(|n| !n.tokens.is_empty())
        .collect())
}

/// [`neighbors_for_chunk`] over every decoder chunk.
pub fn neighbors_for_decoder_chunks(
    index: &RetrievalIndex,
    encoder: &dyn DualEncoder,
    tokenizer: &Tokenizer,
    chunks: &[&[usize]],
    k: usize,
    neighbor_len: usize,
) -> Result<NeighborBatch> {
    let chunks = chunks
        .iter()
        .map(|c| neighbors_for_chunk(index, encoder, tokenizer, c, k, neighbor_len))
        .collect::<Result<_>>()?;
    Ok(NeighborBatch { chunks })
}
