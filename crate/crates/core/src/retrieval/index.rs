use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::autodiff::kernels::dot;
use crate::par::{self, Execution};

use super::{DualEncoder, TextChunk};

/// An embedded chunk. `id` is its position in the index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: usize,
    pub doc_id: String,
    pub ordinal: usize,
    pub title: String,
    pub text: String,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub id: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexHeader {
    encoder: String,
    dim: usize,
    count: usize,
}

/// Immutable dot-product index; rebuild to change it.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    encoder: String,
    dim: usize,
    chunks: Vec<Chunk>,
    exec: Execution,
}

/// Descending score, then ascending id.
pub fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

/// Scored rows scanned per work item.
const SCAN_BLOCK: usize = 512;

impl RetrievalIndex {
    pub fn build(chunks: Vec<TextChunk>, encoder: &dyn DualEncoder) -> Self {
        let chunks = chunks
            .into_iter()
            .enumerate()
            .map(|(id, c)| Chunk {
                id,
                embedding: encoder.encode_context(&c.text),
                doc_id: c.doc_id,
                ordinal: c.ordinal,
                title: c.title,
                text: c.text,
            })
            .collect();
        Self {
            encoder: encoder.tag(),
            dim: encoder.dim(),
            chunks,
            exec: Execution::default(),
        }
    }

    /// Index from precomputed embeddings; ids are reassigned by position.
    pub fn from_embedded(encoder: &str, dim: usize, mut chunks: Vec<Chunk>) -> Result<Self> {
        for (i, c) in chunks.iter_mut().enumerate() {
            if c.embedding.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.embedding.len(),
                });
            }
            c.id = i;
        }
        Ok(Self {
            encoder: encoder.to_string(),
            dim,
            chunks,
            exec: Execution::default(),
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn encoder_tag(&self) -> &str {
        &self.encoder
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn chunk(&self, id: usize) -> Option<&Chunk> {
        self.chunks.get(id)
    }

    /// The `k` best chunks by dot product (all of them if the index is
    /// smaller), most relevant first; equal scores rank the lower id first.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let blocks: Vec<&[Chunk]> = self.chunks.chunks(SCAN_BLOCK).collect();
        let partial = par::map(self.exec, &blocks, |block| {
            let mut hits: Vec<Hit> = block
                .iter()
                .map(|c| Hit {
                    id: c.id,
                    score: dot(query, &c.embedding),
                })
                .collect();
            keep_best(&mut hits, k);
            hits
        });
        let mut hits: Vec<Hit> = partial.into_iter().flatten().collect();
        keep_best(&mut hits, k);
        Ok(hits)
    }

    /// Encodes `text` with `encoder` (which must match the index) and ranks.
    pub fn query(&self, encoder: &dyn DualEncoder, text: &str, k: usize) -> Result<Vec<Hit>> {
        if encoder.tag() != self.encoder {
            return Err(Error::Config(format!(
                "index was built with `{}`, query encoder is `{}`",
                self.encoder,
                encoder.tag()
            )));
        }
        self.top_k(&encoder.encode_query(text), k)
    }

    /// Line-delimited JSON: a header `{encoder, dim, count}` followed by one
    /// record per chunk `{id, doc_id, ordinal, title, text, embedding}`.
    /// Floats are written in shortest round-trip form.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = IndexHeader {
            encoder: self.encoder.clone(),
            dim: self.dim,
            count: self.chunks.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for c in &self.chunks {
            serde_json::to_writer(&mut w, c)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        let header: IndexHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l?)?,
            None => return Err(Error::Format("index file is empty".into())),
        };
        let mut chunks = Vec::with_capacity(header.count);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let c: Chunk = serde_json::from_str(&line)?;
            if c.id != chunks.len() {
                return Err(Error::Format(format!(
                    "chunk id {} out of sequence (expected {})",
                    c.id,
                    chunks.len()
                )));
            }
            chunks.push(c);
        }
        if chunks.len() != header.count {
            return Err(Error::Format(format!(
                "header announces {} chunks, file has {}",
                header.count,
                chunks.len()
            )));
        }
        Self::from_embedded(&header.encoder, header.dim, chunks)
    }
}

fn keep_best(hits: &mut Vec<Hit>, k: usize) {
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, rank_order);
        hits.truncate(k);
    }
    hits.sort_by(rank_order);
}
