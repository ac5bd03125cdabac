//! Turns synthetic examples into model inputs and model outputs into
//! predictions.

use std::collections::BTreeSet;

use crate::error::Result;
use crate::metrics::{self, Metric, MetricReport, QAExample};
use crate::model::{chunk_tokens, greedy_decode, DecodeOptions, DecoderInput, Model};
use crate::par::Execution;
use crate::peft::compute_left_padding;
use crate::retrieval::{
    assemble_gpt_prompt, neighbors_for_chunk, question_line, HashedBow, Passage, RetrievalIndex,
    Tokenizer, EOS_ID, PAD_ID,
};
use crate::retro::{Neighbor, NeighborBatch};

use super::config::RetroSettings;
use super::synthetic::SyntheticTask;

/// A tokenized decoder input with next-token targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub virtual_at: usize,
    /// One entry per decoder position, virtual rows included.
    pub targets: Vec<Option<usize>>,
    pub neighbors: Option<NeighborBatch>,
}

impl Sample {
    pub fn input(&self) -> DecoderInput<'_> {
        DecoderInput {
            tokens: &self.tokens,
            virtual_at: self.virtual_at,
            neighbors: self.neighbors.as_ref(),
        }
    }
}

/// Task data plus the tokenizer, retriever and index built from it.
#[derive(Clone, Debug)]
pub struct TaskEnv {
    pub task: SyntheticTask,
    pub tokenizer: Tokenizer,
    pub encoder: HashedBow,
    pub index: RetrievalIndex,
    pub retro: RetroSettings,
    /// Whether retrieved text reaches the model.
    pub retrieval: bool,
}

impl TaskEnv {
    pub fn new(task: SyntheticTask, retro: RetroSettings, retrieval: bool) -> Result<Self> {
        let encoder = task.encoder();
        let index = task.index(&encoder)?;
        let tokenizer = task.tokenizer();
        Ok(Self {
            task,
            tokenizer,
            encoder,
            index,
            retro,
            retrieval,
        })
    }

    /// Prompt text: retrieved passages plus the question line for the plain
    /// decoder, the question line alone for the retrieval-enhanced one.
    pub fn prompt_text(&self, model: &Model, ex: &QAExample) -> Result<String> {
        if model.arch.retro().is_some() || !self.retrieval {
            return Ok(question_line(&ex.question));
        }
        let hits = self
            .index
            .query(&self.encoder, &ex.question, self.retro.k_neighbors)?;
        let passages: Vec<Passage<'_>> = hits
            .iter()
            .filter_map(|h| self.index.chunk(h.id).map(|c| (c, h.score)))
            .map(|(c, score)| Passage {
                title: &c.title,
                source: &c.text,
                score,
            })
            .collect();
        Ok(assemble_gpt_prompt(&passages, &ex.question))
    }

    pub fn retrieve(&self, chunk: &[usize]) -> Result<Vec<Neighbor>> {
        neighbors_for_chunk(
            &self.index,
            &self.encoder,
            &self.tokenizer,
            chunk,
            self.retro.k_neighbors,
            self.retro.neighbor_len,
        )
    }

    /// Chunk length used to lay out inputs for both architectures, so the
    /// plain decoder sees exactly the token positions the retrieval-enhanced
    /// one does.
    pub fn chunk_size(&self) -> usize {
        self.retro.chunk_size
    }

    /// Lays out `body` as `[pad | virtual | body | pad]`. The left padding
    /// makes the first `align` tokens of `body` end on a chunk boundary; the
    /// right padding completes the last chunk. Targets are the next body
    /// token for body positions `supervise_from..` (none for padding).
    pub fn sample(&self, model: &Model, body: &[usize], align: usize, supervise_from: usize) -> Result<Sample> {
        let nv = model.n_virtual();
        let m = self.chunk_size();
        let left = compute_left_padding(nv, align, m);
        let mut tokens = vec![PAD_ID; left];
        tokens.extend_from_slice(body);
        let total = (tokens.len() + nv).div_ceil(m) * m;
        tokens.resize(total - nv, PAD_ID);
        let pos = |j: usize| if j < left { j } else { j + nv };
        let mut targets = vec![None; total];
        for i in supervise_from..body.len().saturating_sub(1) {
            targets[pos(left + i)] = Some(body[i + 1]);
        }
        let neighbors = if model.arch.retro().is_some() && self.retrieval {
            let chunks = (0..total / m)
                .map(|u| {
                    let ids = chunk_tokens(&tokens, left, nv, u * m, (u + 1) * m);
                    self.retrieve(&ids)
                })
                .collect::<Result<_>>()?;
            Some(NeighborBatch { chunks })
        } else {
            None
        };
        Ok(Sample {
            tokens,
            virtual_at: left,
            targets,
            neighbors,
        })
    }

    /// Prompt followed by the gold answer and end of sequence; only the
    /// answer is supervised.
    pub fn tuning_sample(&self, model: &Model, ex: &QAExample) -> Result<Sample> {
        let prompt = self.tokenizer.encode(&self.prompt_text(model, ex)?);
        let mut body = prompt.clone();
        body.extend(self.tokenizer.encode(&ex.answers[0]));
        body.push(EOS_ID);
        self.sample(model, &body, prompt.len(), prompt.len() - 1)
    }

    /// Pretraining mix: corpus documents (only those of pretraining
    /// entities unless `all_docs`), plus their reading pages.
    pub fn pretraining_samples(&self, model: &Model, qa_pages: bool, all_docs: bool) -> Result<Vec<Sample>> {
        let seen: BTreeSet<&str> = self
            .task
            .pretrain
            .iter()
            .flat_map(|ex| ex.documents.iter().map(|d| d.title.as_str()))
            .collect();
        let mut out = Vec::new();
        for d in self.task.corpus.iter().filter(|d| all_docs || seen.contains(d.title.as_str())) {
            let mut body = self.tokenizer.encode(&d.text);
            body.push(EOS_ID);
            out.push(self.sample(model, &body, 0, 0)?);
        }
        if qa_pages {
            for ex in &self.task.pretrain {
                let (q, a) = SyntheticTask::qa_page(ex);
                let prompt = self.tokenizer.encode(&q);
                let mut body = prompt.clone();
                body.extend(self.tokenizer.encode(&a));
                body.push(EOS_ID);
                out.push(self.sample(model, &body, prompt.len(), 0)?);
            }
        }
        Ok(out)
    }

    /// Greedy answer for `ex`, detokenized (end of sequence dropped).
    pub fn predict(&self, model: &Model, ex: &QAExample, max_new: usize) -> Result<String> {
        let prompt = self.tokenizer.encode(&self.prompt_text(model, ex)?);
        let nv = model.n_virtual();
        let left = compute_left_padding(nv, prompt.len(), self.chunk_size());
        let mut tokens = vec![PAD_ID; left];
        tokens.extend(prompt);
        let opts = DecodeOptions {
            max_new,
            stop_id: Some(EOS_ID),
            pad_id: PAD_ID,
            virtual_at: left,
        };
        let retriever = |chunk: &[usize]| self.retrieve(chunk);
        let use_retriever = model.arch.retro().is_some() && self.retrieval;
        let out = greedy_decode(
            model,
            &tokens,
            &opts,
            use_retriever.then_some(&retriever as &dyn crate::model::ChunkRetriever),
        )?;
        Ok(self.tokenizer.decode(&out[tokens.len()..]))
    }

    /// Token F1 of greedy answers over `examples`.
    pub fn evaluate(
        &self,
        model: &Model,
        examples: &[QAExample],
        max_new: usize,
        exec: Execution,
    ) -> Result<MetricReport> {
        metrics::evaluate(|ex| self.predict(model, ex, max_new), examples, Metric::F1, exec)
    }
}
