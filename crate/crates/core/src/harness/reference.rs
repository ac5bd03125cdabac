//! Published large-scale results, bundled for side-by-side display only.
//! These numbers come from 823M to 48B parameter models on six external
//! datasets and are not targets for the toy runs.

use std::fmt::Write as _;

const SCORES: &str = include_str!("published_scores.tsv");
const COUNTS: &str = include_str!("published_counts.tsv");

pub const DATASETS: [&str; 7] = ["NQ", "TQA", "NQA", "QASPER", "QUALITY", "QMSUM", "AVERAGE"];

/// One row of the published GPT vs RETRO comparison: scores on the 0 to 100
/// scale, `(gpt, retro)` per dataset in [`DATASETS`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct PublishedRow {
    pub size: String,
    pub method: String,
    pub scores: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PublishedCounts {
    pub arch: String,
    pub size: String,
    pub base: String,
    pub ptuning: String,
    pub adapter: String,
    pub lora: String,
}

fn rows(text: &str) -> impl Iterator<Item = Vec<&str>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| l.split('\t').collect())
}

pub fn published_scores() -> Vec<PublishedRow> {
    rows(SCORES)
        .map(|f| {
            let nums: Vec<f64> = f[2..]
                .iter()
                .map(|x| x.parse().expect("bundled table is numeric"))
                .collect();
            PublishedRow {
                size: f[0].to_string(),
                method: f[1].to_string(),
                scores: nums.chunks(2).map(|p| (p[0], p[1])).collect(),
            }
        })
        .collect()
}

pub fn published_counts() -> Vec<PublishedCounts> {
    rows(COUNTS)
        .map(|f| PublishedCounts {
            arch: f[0].to_string(),
            size: f[1].to_string(),
            base: f[2].to_string(),
            ptuning: f[3].to_string(),
            adapter: f[4].to_string(),
            lora: f[5].to_string(),
        })
        .collect()
}

/// Text rendering of the published averages, headed as published data.
pub fn render_published() -> String {
    let mut out = String::from(
        "PUBLISHED DATA (large-scale models, external datasets; not produced by this code)\n",
    );
    let _ = writeln!(out, "{:<12} {:<12} {:>10} {:>10}", "size", "method", "GPT avg", "RETRO avg");
    for r in published_scores() {
        let (g, t) = r.scores[DATASETS.len() - 1];
        let _ = writeln!(out, "{:<12} {:<12} {g:>10.2} {t:>10.2}", r.size, r.method);
    }
    out.push('\n');
    let _ = writeln!(
        out,
        "{:<6} {:<12} {:>7} {:>9} {:>9} {:>7}",
        "type", "size", "base", "P-tuning", "Adapters", "LoRA"
    );
    for c in published_counts() {
        let _ = writeln!(
            out,
            "{:<6} {:<12} {:>7} {:>9} {:>9} {:>7}",
            c.arch, c.size, c.base, c.ptuning, c.adapter, c.lora
        );
    }
    out
}
