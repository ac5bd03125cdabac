//! Token F1, exact match and ROUGE, plus dataset-level evaluation.

mod scores;

pub use scores::{
    exact_match, lcs_len, normalize_answer, rouge_geo, rouge_scores, rouge_tokens, token_f1,
    token_f1_single, Rouge,
};

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    DocQa,
    MultipleChoice,
    Summarization,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub title: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default)]
    pub documents: Vec<Document>,
    pub task: TaskKind,
}

impl QAExample {
    pub fn validate(&self) -> Result<()> {
        if self.answers.is_empty() {
            return Err(Error::Dataset(format!("example `{}` has no gold answer", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    F1,
    ExactMatch,
    RougeGeo,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::F1 => "f1",
            Metric::ExactMatch => "em",
            Metric::RougeGeo => "rouge-geo",
        }
    }

    /// F1 (or EM) for document QA, EM for multiple choice, the ROUGE
    /// geometric mean for summarization.
    pub fn applies_to(self, task: TaskKind) -> bool {
        matches!(
            (self, task),
            (Metric::F1 | Metric::ExactMatch, TaskKind::DocQa)
                | (Metric::ExactMatch, TaskKind::MultipleChoice)
                | (Metric::RougeGeo, TaskKind::Summarization)
        )
    }

    pub fn default_for(task: TaskKind) -> Self {
        match task {
            TaskKind::DocQa => Metric::F1,
            TaskKind::MultipleChoice => Metric::ExactMatch,
            TaskKind::Summarization => Metric::RougeGeo,
        }
    }

    /// Score in `[0, 1]`; ROUGE takes the best gold answer.
    pub fn score(self, prediction: &str, golds: &[String]) -> f64 {
        match self {
            Metric::F1 => token_f1(prediction, golds),
            Metric::ExactMatch => exact_match(prediction, golds),
            Metric::RougeGeo => golds
                .iter()
                .map(|g| rouge_scores(prediction, g).geo())
                .fold(0.0, f64::max),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f1" => Ok(Metric::F1),
            "em" | "exact-match" => Ok(Metric::ExactMatch),
            "rouge-geo" | "rouge" => Ok(Metric::RougeGeo),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    pub scores: Vec<f64>,
    /// Arithmetic mean of `scores`, in `[0, 1]`.
    pub mean: f64,
}

impl MetricReport {
    /// Mean of `scores`. Summation runs over the sorted scores so the result
    /// does not depend on example order.
    pub fn new(metric: Metric, scores: Vec<f64>) -> Self {
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let mean = if sorted.is_empty() {
            0.0
        } else {
            sorted.iter().sum::<f64>() / sorted.len() as f64
        };
        Self {
            metric,
            scores,
            mean,
        }
    }

    /// Mean on the 0 to 100 display scale.
    pub fn percent(&self) -> f64 {
        self.mean * 100.0
    }
}

/// Scores `runner`'s prediction for each example. Examples are independent
/// and may be processed concurrently; scores keep dataset order.
pub fn evaluate<F>(runner: F, dataset: &[QAExample], metric: Metric, exec: Execution) -> Result<MetricReport>
where
    F: Fn(&QAExample) -> Result<String> + Sync + Send,
{
    for ex in dataset {
        ex.validate()?;
        if !metric.applies_to(ex.task) {
            return Err(Error::MetricMismatch {
                metric: metric.name().into(),
                task: format!("{:?}", ex.task),
            });
        }
    }
    let scores = par::try_map(exec, dataset, |ex| {
        runner(ex).map(|p| metric.score(&p, &ex.answers))
    })?;
    Ok(MetricReport::new(metric, scores))
}

/// One JSON object per line with fields `id`, `question`, `answers`,
/// `documents` (`[{title, text}]`) and `task` (`doc-qa`, `multiple-choice` or
/// `summarization`).
pub fn load_jsonl(path: &Path) -> Result<Vec<QAExample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: QAExample = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("line {}: {e}", n + 1)))?;
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

pub fn save_jsonl(path: &Path, examples: &[QAExample]) -> Result<()> {
    let mut text = String::new();
    for ex in examples {
        text.push_str(&serde_json::to_string(ex)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests;
