use crate::error::{Error, Result};
use crate::retro::{Neighbor, NeighborBatch};

use super::{DecoderInput, Model};

/// Index of the largest entry; ties go to the lowest index, NaN never wins.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Supplies neighbors for one complete decoder chunk during generation.
///
/// `chunk` holds the chunk's token ids; virtual-token positions are left out.
pub trait ChunkRetriever {
    fn retrieve(&self, chunk: &[usize]) -> Result<Vec<Neighbor>>;
}

impl<F> ChunkRetriever for F
where
    F: Fn(&[usize]) -> Result<Vec<Neighbor>>,
{
    fn retrieve(&self, chunk: &[usize]) -> Result<Vec<Neighbor>> {
        self(chunk)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecodeOptions {
    pub max_new: usize,
    pub stop_id: Option<usize>,
    /// Right padding used to keep retrieval-enhanced inputs chunk aligned.
    pub pad_id: usize,
    pub virtual_at: usize,
}

impl DecodeOptions {
    pub fn new(max_new: usize, stop_id: Option<usize>) -> Self {
        Self {
            max_new,
            stop_id,
            pad_id: 0,
            virtual_at: 0,
        }
    }
}

/// Greedy decoding. Returns the prompt followed by the generated ids; the
/// stop id, when produced, is included. Generation also ends once the
/// sequence fills `max_seq_len`.
///
/// Retrieval-enhanced models are right padded to a multiple of the chunk
/// size at every step; each complete chunk is sent to `retriever` once.
pub fn greedy_decode(
    model: &Model,
    prompt: &[usize],
    opts: &DecodeOptions,
    retriever: Option<&dyn ChunkRetriever>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let nv = model.n_virtual();
    let m = model.chunk_size();
    let max_len = model.config().max_seq_len;
    let is_retro = model.arch.retro().is_some();
    let mut seq = prompt.to_vec();
    let mut cache: Vec<Vec<Neighbor>> = Vec::new();
    for _ in 0..opts.max_new {
        let real = seq.len() + nv;
        let padded = real.div_ceil(m) * m;
        if real == max_len {
            break;
        }
        if padded > max_len {
            if seq.len() == prompt.len() {
                return Err(Error::SequenceTooLong {
                    len: padded,
                    max: max_len,
                });
            }
            break;
        }
        let mut tokens = seq.clone();
        tokens.resize(padded - nv, opts.pad_id);
        let batch = if is_retro {
            let complete = real / m;
            while cache.len() < complete {
                let u = cache.len();
                let ids = chunk_tokens(&seq, opts.virtual_at, nv, u * m, (u + 1) * m);
                let found = match retriever {
                    Some(r) if !ids.is_empty() => r.retrieve(&ids)?,
                    _ => Vec::new(),
                };
                cache.push(found);
            }
            let mut chunks = cache.clone();
            chunks.resize(padded / m, Vec::new());
            Some(NeighborBatch { chunks })
        } else {
            None
        };
        let input = DecoderInput {
            tokens: &tokens,
            virtual_at: opts.virtual_at,
            neighbors: batch.as_ref(),
        };
        let logits = model.logits(&input)?;
        let next = argmax_lowest(logits.row(real - 1));
        seq.push(next);
        if opts.stop_id == Some(next) {
            break;
        }
    }
    Ok(seq)
}

/// Token ids at sequence positions `start..end`, skipping virtual positions.
pub(crate) fn chunk_tokens(
    tokens: &[usize],
    virtual_at: usize,
    n_virtual: usize,
    start: usize,
    end: usize,
) -> Vec<usize> {
    (start..end)
        .filter_map(|p| {
            if n_virtual > 0 && p >= virtual_at && p < virtual_at + n_virtual {
                None
            } else if n_virtual > 0 && p >= virtual_at + n_virtual {
                tokens.get(p - n_virtual).copied()
            } else {
                tokens.get(p).copied()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_lowest(&[0.0, 0.0]), 0);
        assert_eq!(argmax_lowest(&[f64::NAN, 1.0]), 1);
    }

    #[test]
    fn chunk_tokens_skips_virtual_rows() {
        let toks = [10, 11, 12, 13];
        // layout: 10 | v v | 11 12 13
        assert_eq!(chunk_tokens(&toks, 1, 2, 0, 3), vec![10]);
        assert_eq!(chunk_tokens(&toks, 1, 2, 3, 6), vec![11, 12, 13]);
        assert_eq!(chunk_tokens(&toks, 0, 0, 2, 6), vec![12, 13]);
    }
}
