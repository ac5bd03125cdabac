use proptest::prelude::*;

use super::*;
use crate::error::Error;

fn golds(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn ex(id: &str, answers: &[&str], task: TaskKind) -> QAExample {
    QAExample {
        id: id.into(),
        question: format!("question {id}"),
        answers: golds(answers),
        documents: Vec::new(),
        task,
    }
}

#[test]
fn f1_hand_values() {
    assert!((token_f1("the answer is 1974", &golds(&["1974"])) - 0.4).abs() < 1e-15);
    assert_eq!(token_f1("blue sky", &golds(&["blue sky"])), 1.0);
    assert_eq!(token_f1("red", &golds(&["blue"])), 0.0);
    assert_eq!(token_f1("", &golds(&["", "x"])), 1.0);
    assert_eq!(token_f1("1974", &golds(&["no", "1974"])), 1.0);
    assert_eq!(token_f1("x", &[]), 0.0);
}

#[test]
fn em_hand_values() {
    assert_eq!(exact_match("(B)", &golds(&["(B)"])), 1.0);
    assert_eq!(exact_match("b", &golds(&["B"])), 1.0);
    assert_eq!(exact_match("(A)", &golds(&["(B)"])), 0.0);
}

#[test]
fn rouge_hand_values() {
    let r = rouge_scores("the cat sat", "the cat sat");
    assert_eq!((r.r1, r.r2, r.rl, r.geo()), (1.0, 1.0, 1.0, 1.0));
    assert!((rouge_geo(0.5, 0.2, 0.4) - 0.04f64.cbrt()).abs() < 1e-15);
    assert_eq!(format!("{:.3}", rouge_geo(0.5, 0.2, 0.4)), "0.342");
    assert_eq!(rouge_geo(0.7, 0.0, 0.3), 0.0);
    // one shared unigram out of 2 and 3, no shared bigram, LCS 1
    let r = rouge_scores("a b", "b c d");
    assert!((r.r1 - 0.4).abs() < 1e-15);
    assert_eq!(r.r2, 0.0);
    assert!((r.rl - 0.4).abs() < 1e-15);
    assert_eq!(lcs_len(&[1, 2, 3, 4], &[2, 4, 3]), 2);
}

#[test]
fn metric_task_pairing() {
    assert!(Metric::F1.applies_to(TaskKind::DocQa));
    assert!(Metric::ExactMatch.applies_to(TaskKind::MultipleChoice));
    assert!(!Metric::F1.applies_to(TaskKind::MultipleChoice));
    assert!(!Metric::RougeGeo.applies_to(TaskKind::DocQa));
    for t in [TaskKind::DocQa, TaskKind::MultipleChoice, TaskKind::Summarization] {
        assert!(Metric::default_for(t).applies_to(t));
    }
    let data = [ex("1", &["x"], TaskKind::Summarization)];
    let r = evaluate(|_| Ok(String::new()), &data, Metric::F1, Execution::Sequential);
    assert!(matches!(r, Err(Error::MetricMismatch { .. })));
}

#[test]
fn evaluate_oracle_empty_and_mean() {
    let data = [
        ex("1", &["1974"], TaskKind::DocQa),
        ex("2", &["blue sky"], TaskKind::DocQa),
        ex("3", &["red"], TaskKind::DocQa),
    ];
    let oracle = evaluate(|e| Ok(e.answers[0].clone()), &data, Metric::F1, Execution::Parallel).unwrap();
    assert_eq!(oracle.percent(), 100.0);
    let empty = evaluate(|_| Ok(String::new()), &data, Metric::F1, Execution::Parallel).unwrap();
    assert_eq!(empty.mean, 0.0);
    let preds = ["the answer is 1974", "blue", "red"];
    let r = evaluate(
        |e| Ok(preds[e.id.parse::<usize>().unwrap() - 1].to_string()),
        &data,
        Metric::F1,
        Execution::Sequential,
    )
    .unwrap();
    // 0.4, 2/3, 1
    assert!((r.mean - (0.4 + 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-15);
    assert_eq!(r.scores.len(), 3);
}

#[test]
fn example_without_answers_is_rejected() {
    let data = [ex("1", &[], TaskKind::DocQa)];
    assert!(evaluate(|_| Ok(String::new()), &data, Metric::F1, Execution::Sequential).is_err());
}

#[test]
fn jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let mut a = ex("a", &["x", "y"], TaskKind::MultipleChoice);
    a.documents.push(Document { title: "T".into(), text: "body".into() });
    let data = vec![a, ex("b", &["z"], TaskKind::Summarization)];
    save_jsonl(&path, &data).unwrap();
    assert_eq!(load_jsonl(&path).unwrap(), data);
    let line = std::fs::read_to_string(&path).unwrap();
    assert!(line.contains(r#""task":"multiple-choice""#));
    std::fs::write(&path, r#"{"id":"q","question":"?","answers":[],"task":"doc-qa"}"#).unwrap();
    assert!(load_jsonl(&path).is_err());
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "the", "C", "d.", "1974", "x,"]), 0..8)
        .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn scores_are_bounded(p in text(), g in text()) {
        let gs = vec![g.clone()];
        for s in [token_f1(&p, &gs), exact_match(&p, &gs), rouge_scores(&p, &g).geo()] {
            prop_assert!((0.0..=1.0).contains(&s));
        }
        let em = exact_match(&p, &gs);
        prop_assert!(em == 0.0 || em == 1.0);
        prop_assert_eq!(token_f1(&p, std::slice::from_ref(&p)), 1.0);
    }

    #[test]
    fn mean_is_order_invariant(mut xs in prop::collection::vec(0.0f64..=1.0, 1..40), seed in 0u64..1000) {
        let a = MetricReport::new(Metric::F1, xs.clone()).mean;
        let n = xs.len();
        for i in 0..n {
            xs.swap(i, (seed as usize * 31 + i * 17) % n);
        }
        prop_assert_eq!(a.to_bits(), MetricReport::new(Metric::F1, xs).mean.to_bits());
    }
}
