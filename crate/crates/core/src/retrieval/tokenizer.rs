use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;
const BYTE_BASE: usize = 2;
const FIRST_WORD: usize = BYTE_BASE + 256;

/// Word-level tokenizer with byte fallback.
///
/// Ids: `0` pad, `1` end of sequence, `2..258` raw bytes, then the known
/// words in sorted order. A word outside the vocabulary is spelled as its
/// UTF-8 bytes; two spelled words in a row are separated by a space byte so
/// they decode as two words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vocab", into = "Vocab")]
pub struct Tokenizer {
    words: Vec<String>,
    lookup: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Vocab {
    words: Vec<String>,
}

impl From<Vocab> for Tokenizer {
    fn from(v: Vocab) -> Self {
        Tokenizer::new(v.words)
    }
}

impl From<Tokenizer> for Vocab {
    fn from(t: Tokenizer) -> Self {
        Vocab { words: t.words }
    }
}

impl Tokenizer {
    /// Vocabulary of the distinct whitespace-separated words of `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::new(texts.into_iter().flat_map(str::split_whitespace).map(str::to_string))
    }

    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let words: Vec<String> = words.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let lookup = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), FIRST_WORD + i))
            .collect();
        Self { words, lookup }
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_WORD + self.words.len()
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        self.lookup.get(word).copied()
    }

    pub fn is_byte(id: usize) -> bool {
        (BYTE_BASE..FIRST_WORD).contains(&id)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev_spelled = false;
        for w in text.split_whitespace() {
            match self.lookup.get(w) {
                Some(&id) => {
                    out.push(id);
                    prev_spelled = false;
                }
                None => {
                    if prev_spelled {
                        out.push(BYTE_BASE + b' ' as usize);
                    }
                    out.extend(w.bytes().map(|b| BYTE_BASE + b as usize));
                    prev_spelled = true;
                }
            }
        }
        out
    }

    /// Words joined by single spaces; pad and end-of-sequence ids are skipped
    /// and invalid UTF-8 in byte runs is replaced.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut pieces: Vec<String> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, pieces: &mut Vec<String>| {
            if !bytes.is_empty() {
                pieces.push(String::from_utf8_lossy(bytes).into_owned());
                bytes.clear();
            }
        };
        for &id in ids {
            if id == PAD_ID || id == EOS_ID {
                continue;
            }
            if Self::is_byte(id) {
                bytes.push((id - BYTE_BASE) as u8);
            } else if let Some(w) = self.words.get(id - FIRST_WORD) {
                flush(&mut bytes, &mut pieces);
                pieces.push(w.clone());
            }
        }
        flush(&mut bytes, &mut pieces);
        pieces.join(" ")
    }
}
