use std::collections::HashMap;
use std::hash::Hash;

/// Lowercase, drop punctuation characters, split on whitespace.
///
/// Articles are kept: the answer phrase "the answer is 1974" scored against
/// "1974" must count all four predicted tokens.
pub fn normalize_answer(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn counts<T: Eq + Hash + Clone>(items: &[T]) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for i in items {
        *m.entry(i.clone()).or_insert(0) += 1;
    }
    m
}

fn overlap<T: Eq + Hash + Clone>(a: &[T], b: &[T]) -> usize {
    let cb = counts(b);
    counts(a)
        .iter()
        .map(|(k, &n)| n.min(cb.get(k).copied().unwrap_or(0)))
        .sum()
}

fn f_measure(matched: usize, pred_len: usize, gold_len: usize) -> f64 {
    if matched == 0 {
        return 0.0;
    }
    let p = matched as f64 / pred_len as f64;
    let r = matched as f64 / gold_len as f64;
    2.0 * p * r / (p + r)
}

/// Bag-of-tokens F1 of `prediction` against one gold answer. Two answers that
/// are both empty after normalization score 1.
pub fn token_f1_single(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    f_measure(overlap(&p, &g), p.len(), g.len())
}

/// Best [`token_f1_single`] over the gold answers (0 if there are none).
pub fn token_f1(prediction: &str, golds: &[String]) -> f64 {
    golds
        .iter()
        .map(|g| token_f1_single(prediction, g))
        .fold(0.0, f64::max)
}

/// 1 if the normalized prediction equals some normalized gold answer.
pub fn exact_match(prediction: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(prediction);
    if golds.iter().any(|g| normalize_answer(g) == p) {
        1.0
    } else {
        0.0
    }
}

/// ROUGE tokens: lowercase alphanumeric runs.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn ngrams(tokens: &[String], n: usize) -> Vec<&[String]> {
    if tokens.len() < n {
        Vec::new()
    } else {
        tokens.windows(n).collect()
    }
}

fn rouge_n(p: &[String], g: &[String], n: usize) -> f64 {
    let pn = ngrams(p, n);
    let gn = ngrams(g, n);
    if pn.is_empty() && gn.is_empty() {
        return if p == g { 1.0 } else { 0.0 };
    }
    f_measure(overlap(&pn, &gn), pn.len(), gn.len())
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rouge {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
}

impl Rouge {
    pub fn geo(&self) -> f64 {
        rouge_geo(self.r1, self.r2, self.rl)
    }
}

/// ROUGE-1, ROUGE-2 and ROUGE-L F-measures (β = 1). When neither side has an
/// n-gram of the required order the component is 1 for identical token
/// sequences and 0 otherwise.
pub fn rouge_scores(prediction: &str, gold: &str) -> Rouge {
    let p = rouge_tokens(prediction);
    let g = rouge_tokens(gold);
    let rl = if p.is_empty() && g.is_empty() {
        1.0
    } else {
        f_measure(lcs_len(&p, &g), p.len(), g.len())
    };
    Rouge {
        r1: rouge_n(&p, &g, 1),
        r2: rouge_n(&p, &g, 2),
        rl,
    }
}

/// `(r1 · r2 · rL)^(1/3)`, or 0 when any component is 0.
pub fn rouge_geo(r1: f64, r2: f64, rl: f64) -> f64 {
    if r1 <= 0.0 || r2 <= 0.0 || rl <= 0.0 {
        0.0
    } else {
        (r1 * r2 * rl).cbrt()
    }
}
