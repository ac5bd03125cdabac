/// One retrieved passage as shown to a plain decoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Passage<'a> {
    pub title: &'a str,
    pub source: &'a str,
    /// Retrieval score; higher is more relevant.
    pub score: f64,
}

/// `Question: {question} Answer: The answer is`
pub fn question_line(question: &str) -> String {
    format!("Question: {question} Answer: The answer is")
}

/// Context prompt for a plain decoder: one `title:`/`source:` pair per
/// passage ordered from most to least relevant (equal scores keep their
/// input order), a blank line, then the question line. Without passages only
/// the question line is emitted.
pub fn assemble_gpt_prompt(passages: &[Passage<'_>], question: &str) -> String {
    let mut ranked: Vec<&Passage<'_>> = passages.iter().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut out = String::new();
    for p in &ranked {
        out.push_str("title: ");
        out.push_str(p.title);
        out.push_str("\nsource: ");
        out.push_str(p.source);
        out.push('\n');
    }
    if !ranked.is_empty() {
        out.push('\n');
    }
    out.push_str(&question_line(question));
    out
}
