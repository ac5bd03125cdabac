//! Entity/attribute fact corpus with question splits over disjoint entities.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Document, QAExample, TaskKind};
use crate::retrieval::{
    chunk_document, normalize_word, question_line, DualEncoder, HashedBow, RetrievalIndex,
    TextChunk, Tokenizer,
};

pub const ATTRIBUTES: [&str; 8] = [
    "color", "city", "animal", "metal", "river", "tool", "fruit", "number",
];

/// Words used by the documents, questions and prompt template.
const FIXED_WORDS: [&str; 10] = [
    "the", "of", "is", "what", ".", "?", "Question:", "Answer:", "The", "answer",
];
/// Words that only appear in the plain-decoder prompt.
const PROMPT_WORDS: [&str; 2] = ["title:", "source:"];

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_entities: usize,
    pub n_attributes: usize,
    /// Pool of value words. A value is an ordered pair of distinct pool
    /// words and no two facts share a value.
    pub vocab: usize,
    /// Pool of name words; entity names are pairs of them, no two names
    /// sharing the same two words.
    pub name_words: usize,
    /// Entities whose questions form the tuning split.
    pub train_entities: usize,
    pub val_entities: usize,
    pub test_entities: usize,
    /// Dimension of the hashed bag-of-words retriever. Every generated word
    /// gets its own bucket.
    pub hash_dim: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_entities: 3000,
            n_attributes: 1,
            vocab: 64,
            name_words: 80,
            train_entities: 128,
            val_entities: 128,
            test_entities: 128,
            hash_dim: 256,
        }
    }
}

fn ordered_pairs(n: usize) -> usize {
    n * n.saturating_sub(1)
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(m));
        if self.n_entities == 0 || self.n_attributes == 0 || self.vocab == 0 || self.name_words == 0 {
            return bad("entity, attribute and vocabulary sizes must be at least 1".into());
        }
        if self.n_attributes > ATTRIBUTES.len() {
            return bad(format!("at most {} attributes are supported", ATTRIBUTES.len()));
        }
        let facts = self.n_entities * self.n_attributes;
        if ordered_pairs(self.vocab) < facts || self.vocab < 2 * self.n_attributes {
            return bad(format!(
                "vocabulary of {} value words cannot give {facts} facts distinct values",
                self.vocab
            ));
        }
        if ordered_pairs(self.name_words) / 2 < self.n_entities {
            return bad(format!(
                "{} name words cannot name {} entities",
                self.name_words, self.n_entities
            ));
        }
        if self.train_entities == 0 || self.val_entities == 0 || self.test_entities == 0 {
            return bad("train, validation and test splits need at least one entity".into());
        }
        if self.train_entities + self.val_entities + self.test_entities >= self.n_entities {
            return bad("question splits leave no pretraining entities".into());
        }
        let words = self.name_words + self.vocab + self.n_attributes + reserved_words().len();
        if words > self.hash_dim {
            return bad(format!(
                "{words} words do not fit in {} hash buckets",
                self.hash_dim
            ));
        }
        Ok(())
    }

    /// Entities seen only through pretraining.
    pub fn pretrain_entities(&self) -> usize {
        self.n_entities - self.train_entities - self.val_entities - self.test_entities
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub entity: String,
    pub attribute: String,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub id: String,
    pub title: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub facts: Vec<Fact>,
    /// One document per entity, titled with the entity name.
    pub corpus: Vec<CorpusDoc>,
    /// Questions about pretraining entities, used as question pages.
    pub pretrain: Vec<QAExample>,
    /// Tuning questions.
    pub train: Vec<QAExample>,
    pub val: Vec<QAExample>,
    pub test: Vec<QAExample>,
}

pub fn question_for(attribute: &str, entity: &str) -> String {
    format!("what is the {attribute} of {entity}")
}

pub fn fact_sentence(f: &Fact) -> String {
    format!("the {} of {} is {} .", f.attribute, f.entity, f.value)
}

/// Short repeat of a fact closing each document, `"{entity} is {value} ."`.
pub fn restatement(f: &Fact) -> String {
    format!("{} is {} .", f.entity, f.value)
}

/// Normalized words the retriever sees in documents and questions.
fn reserved_words() -> BTreeSet<String> {
    FIXED_WORDS
        .iter()
        .chain(&PROMPT_WORDS)
        .filter_map(|w| normalize_word(w))
        .collect()
}

fn pseudo_word<R: Rng + ?Sized>(rng: &mut R) -> String {
    let syllables = rng.random_range(2..=3);
    (0..syllables)
        .map(|_| {
            let c = ONSETS[rng.random_range(0..ONSETS.len())];
            let v = VOWELS[rng.random_range(0..VOWELS.len())];
            format!("{c}{v}")
        })
        .collect()
}

/// Facts "the {attr} of {entity} is {value}", one document per entity
/// (closed by a restatement of each fact), and
/// questions "what is the {attr} of {entity}" split by entity into
/// pretraining, train (tuning), validation and test. Deterministic in `seed`.
pub fn generate_synthetic_kv_task(seed: u64, spec: &SyntheticSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = HashedBow::new(spec.hash_dim);
    let attributes = &ATTRIBUTES[..spec.n_attributes];

    let mut used_buckets: HashSet<usize> = HashSet::new();
    let mut seen: HashSet<String> = HashSet::new();
    for w in reserved_words().iter().map(String::as_str).chain(attributes.iter().copied()) {
        used_buckets.insert(enc.bucket(w));
        seen.insert(w.to_string());
    }
    let mut fresh = |rng: &mut ChaCha8Rng| -> Result<String> {
        for _ in 0..100_000 {
            let w = pseudo_word(rng);
            if seen.contains(&w) || !used_buckets.insert(enc.bucket(&w)) {
                continue;
            }
            seen.insert(w.clone());
            return Ok(w);
        }
        Err(Error::Dataset("could not find a word with a free hash bucket".into()))
    };
    let names = (0..spec.name_words)
        .map(|_| fresh(&mut rng))
        .collect::<Result<Vec<_>>>()?;
    let pool = (0..spec.vocab)
        .map(|_| fresh(&mut rng))
        .collect::<Result<Vec<_>>>()?;
    let pairs = |words: &[String], rng: &mut ChaCha8Rng| {
        let mut out: Vec<(usize, usize)> = (0..words.len())
            .flat_map(|i| (0..words.len()).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        out.shuffle(rng);
        out
    };
    // A bag-of-words retriever cannot tell "a b" from "b a", so each word
    // pair names at most one entity.
    let mut unordered = HashSet::new();
    let entities: Vec<String> = pairs(&names, &mut rng)
        .into_iter()
        .filter(|&(i, j)| unordered.insert((i.min(j), i.max(j))))
        .take(spec.n_entities)
        .map(|(i, j)| format!("{} {}", names[i], names[j]))
        .collect();
    let mut values = pairs(&pool, &mut rng);

    let mut facts = Vec::new();
    let mut corpus = Vec::new();
    for (i, e) in entities.iter().enumerate() {
        let mut order: Vec<&str> = attributes.to_vec();
        order.shuffle(&mut rng);
        // No value word repeats inside one document.
        let mut taken: Vec<usize> = Vec::new();
        let mut mine = Vec::new();
        for a in order {
            let pos = values
                .iter()
                .position(|(x, y)| !taken.contains(x) && !taken.contains(y))
                .ok_or_else(|| Error::Dataset("ran out of distinct values".into()))?;
            let (x, y) = values.remove(pos);
            taken.extend([x, y]);
            mine.push(Fact {
                entity: e.clone(),
                attribute: a.to_string(),
                value: format!("{} {}", pool[x], pool[y]),
            });
        }
        let mut sentences: Vec<String> = mine.iter().map(fact_sentence).collect();
        sentences.extend(mine.iter().map(restatement));
        let text = sentences.join(" ");
        corpus.push(CorpusDoc {
            id: format!("doc{i}"),
            title: e.clone(),
            text,
        });
        facts.extend(mine);
    }

    let mut order: Vec<usize> = (0..spec.n_entities).collect();
    order.shuffle(&mut rng);
    let (val_ids, rest) = order.split_at(spec.val_entities);
    let (test_ids, rest) = rest.split_at(spec.test_entities);
    let (train_ids, pretrain_ids) = rest.split_at(spec.train_entities);
    let split = |ids: &[usize], name: &str| -> Vec<QAExample> {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.iter()
            .flat_map(|&i| {
                let doc = &corpus[i];
                facts
                    .iter()
                    .filter(move |f| f.entity == doc.title)
                    .map(move |f| QAExample {
                        id: format!("{name}-{}-{}", f.entity.replace(' ', "_"), f.attribute),
                        question: question_for(&f.attribute, &f.entity),
                        answers: vec![f.value.clone()],
                        documents: vec![Document {
                            title: doc.title.clone(),
                            text: doc.text.clone(),
                        }],
                        task: TaskKind::DocQa,
                    })
            })
            .collect()
    };
    let task = SyntheticTask {
        spec: spec.clone(),
        seed,
        pretrain: split(pretrain_ids, "pretrain"),
        train: split(train_ids, "train"),
        val: split(val_ids, "val"),
        test: split(test_ids, "test"),
        facts,
        corpus,
    };
    task.check_answers_unique()?;
    Ok(task)
}

impl SyntheticTask {
    /// Every question of every split.
    pub fn questions(&self) -> impl Iterator<Item = &QAExample> {
        self.pretrain
            .iter()
            .chain(&self.train)
            .chain(&self.val)
            .chain(&self.test)
    }

    pub fn encoder(&self) -> HashedBow {
        HashedBow::new(self.spec.hash_dim)
    }

    pub fn chunks(&self) -> Result<Vec<TextChunk>> {
        let mut out = Vec::new();
        for d in &self.corpus {
            out.extend(chunk_document(&d.id, &d.title, &d.text)?);
        }
        Ok(out)
    }

    pub fn index(&self, encoder: &dyn DualEncoder) -> Result<RetrievalIndex> {
        Ok(RetrievalIndex::build(self.chunks()?, encoder))
    }

    /// Vocabulary covering documents, questions, both prompt formats and
    /// every value word.
    pub fn tokenizer(&self) -> Tokenizer {
        let mut words: BTreeSet<String> = FIXED_WORDS
            .iter()
            .chain(&PROMPT_WORDS)
            .map(|w| w.to_string())
            .collect();
        for d in &self.corpus {
            words.extend(d.title.split_whitespace().map(str::to_string));
            words.extend(d.text.split_whitespace().map(str::to_string));
        }
        Tokenizer::new(words)
    }

    /// Reading page used in pretraining: `"{document} {question} ?"`
    /// followed by the answer.
    pub fn qa_page(ex: &QAExample) -> (String, String) {
        let doc = ex.documents.first().map_or("", |d| d.text.as_str());
        (format!("{doc} {} ?", ex.question), ex.answers[0].clone())
    }

    /// Zero-shot and tuning question line.
    pub fn template(ex: &QAExample) -> String {
        question_line(&ex.question)
    }

    /// Every gold answer occurs, as a whole phrase, in exactly one corpus
    /// chunk.
    fn check_answers_unique(&self) -> Result<()> {
        let chunks = self.chunks()?;
        for ex in self.questions() {
            let gold = format!(" {} ", ex.answers[0]);
            let hits = chunks
                .iter()
                .filter(|c| format!(" {} ", c.text).contains(&gold))
                .count();
            if hits != 1 {
                return Err(Error::Dataset(format!(
                    "answer `{gold}` occurs in {hits} chunks"
                )));
            }
        }
        Ok(())
    }
}
