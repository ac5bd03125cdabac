use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Query and context encoders scored by dot product.
pub trait DualEncoder: Send + Sync {
    /// Stable identifier stored in index files.
    fn tag(&self) -> String;
    fn dim(&self) -> usize;
    fn encode_query(&self, text: &str) -> Vec<f64>;
    fn encode_context(&self, text: &str) -> Vec<f64>;
}

pub const DEFAULT_HASH_DIM: usize = 256;

/// Hashed bag of words: lowercased words with surrounding punctuation
/// removed are hashed (FNV-1a, 64 bit) into `dim` count buckets, then the
/// vector is L2-normalized. The same map serves queries and contexts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedBow {
    pub dim: usize,
}

impl Default for HashedBow {
    fn default() -> Self {
        Self {
            dim: DEFAULT_HASH_DIM,
        }
    }
}

impl HashedBow {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "hash dimension must be positive");
        Self { dim }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        let dim = tag.strip_prefix("hashed-bow/")?.parse().ok()?;
        (dim > 0).then_some(Self { dim })
    }

    pub fn bucket(&self, word: &str) -> usize {
        (fnv1a(word.as_bytes()) % self.dim as u64) as usize
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for w in text.split_whitespace().filter_map(normalize_word) {
            v[self.bucket(&w)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl DualEncoder for HashedBow {
    fn tag(&self) -> String {
        format!("hashed-bow/{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_query(&self, text: &str) -> Vec<f64> {
        self.encode(text)
    }

    fn encode_context(&self, text: &str) -> Vec<f64> {
        self.encode(text)
    }
}

/// Lowercases and trims leading/trailing ASCII punctuation; `None` if nothing is left.
pub fn normalize_word(w: &str) -> Option<String> {
    let t = w.trim_matches(|c: char| c.is_ascii_punctuation());
    (!t.is_empty()).then(|| t.to_lowercase())
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionStats {
    pub words: usize,
    pub buckets_used: usize,
    /// Words sharing a bucket with at least one other word.
    pub colliding_words: usize,
}

impl CollisionStats {
    pub fn rate(&self) -> f64 {
        if self.words == 0 {
            0.0
        } else {
            self.colliding_words as f64 / self.words as f64
        }
    }
}

/// Bucket collisions among the distinct normalized `words`.
pub fn collision_stats<'a>(enc: &HashedBow, words: impl IntoIterator<Item = &'a str>) -> CollisionStats {
    let mut distinct: Vec<String> = words.into_iter().filter_map(normalize_word).collect();
    distinct.sort();
    distinct.dedup();
    let mut per_bucket: HashMap<usize, usize> = HashMap::new();
    for w in &distinct {
        *per_bucket.entry(enc.bucket(w)).or_default() += 1;
    }
    CollisionStats {
        words: distinct.len(),
        buckets_used: per_bucket.len(),
        colliding_words: per_bucket.values().filter(|&&n| n > 1).sum(),
    }
}
