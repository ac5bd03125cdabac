use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Words per retrieval chunk.
pub const CHUNK_WORDS: usize = 100;

/// One window of a document, before embedding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextChunk {
    pub doc_id: String,
    pub ordinal: usize,
    pub title: String,
    pub text: String,
}

/// Splits `text` into consecutive windows of [`CHUNK_WORDS`] whitespace
/// separated words; the last window may be shorter. Words inside a chunk are
/// joined by single spaces.
pub fn chunk_document(doc_id: &str, title: &str, text: &str) -> Result<Vec<TextChunk>> {
    chunk_document_with(doc_id, title, text, CHUNK_WORDS)
}

pub fn chunk_document_with(
    doc_id: &str,
    title: &str,
    text: &str,
    words_per_chunk: usize,
) -> Result<Vec<TextChunk>> {
    if words_per_chunk == 0 {
        return Err(Error::Config("words_per_chunk must be at least 1".into()));
    }
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::EmptyDocument);
    }
    Ok(words
        .chunks(words_per_chunk)
        .enumerate()
        .map(|(ordinal, w)| TextChunk {
            doc_id: doc_id.to_string(),
            ordinal,
            title: title.to_string(),
            text: w.join(" "),
        })
        .collect())
}
