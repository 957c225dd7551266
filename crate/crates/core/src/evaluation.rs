//! Metrics, loss rendering and dataset loading.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::llm::{LlmError, PurposeTag};
use crate::prompts::TemplateId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

impl Sample {
    pub fn new(id: impl Into<String>, question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            answer: answer.into(),
            context: None,
        }
    }
}

/// A score in [0, 1] plus the text form of the loss shown to meta prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric_name: String,
    pub score: f64,
    pub feedback: String,
}

/// Lowercase, drop ASCII punctuation, drop articles, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn feedback(metric: &str, score: f64, prediction: &str, truth: &str) -> String {
    let verdict = if score >= 1.0 {
        "The prediction matches the ground truth."
    } else if score <= 0.0 {
        "The prediction does not match the ground truth."
    } else {
        "The prediction partially matches the ground truth."
    };
    format!(
        "Metric: {metric}\nScore: {score:.4}\nPrediction: {prediction}\nGround truth: {truth}\nNormalized prediction: {}\nNormalized ground truth: {}\n{verdict}",
        normalize_answer(prediction),
        normalize_answer(truth),
    )
}

pub fn exact_match(prediction: &str, truth: &str) -> EvalResult {
    let score = if normalize_answer(prediction) == normalize_answer(truth) {
        1.0
    } else {
        0.0
    };
    EvalResult {
        metric_name: "em".into(),
        score,
        feedback: feedback("em", score, prediction, truth),
    }
}

pub fn token_f1(prediction: &str, truth: &str) -> EvalResult {
    let score = f1_score(&normalize_answer(prediction), &normalize_answer(truth));
    EvalResult {
        metric_name: "f1".into(),
        score,
        feedback: feedback("f1", score, prediction, truth),
    }
}

fn f1_score(pred: &str, truth: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let t: Vec<&str> = truth.split_whitespace().collect();
    if p.is_empty() && t.is_empty() {
        return 1.0;
    }
    if p.is_empty() || t.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for w in &t {
        *counts.entry(w).or_default() += 1;
    }
    let mut common = 0i64;
    for w in &p {
        if let Some(c) = counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / t.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Metric {
    ExactMatch,
    TokenF1,
    /// LLM-as-judge; scores come from the meta model.
    Judge { rubric: String },
}

impl Metric {
    pub fn parse(name: &str) -> Option<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "em" | "exact_match" => Some(Metric::ExactMatch),
            "f1" | "token_f1" => Some(Metric::TokenF1),
            "judge" => Some(Metric::Judge {
                rubric: "Score 1.0 if the prediction answers the question as the reference does, 0.0 otherwise.".into(),
            }),
            _ => None,
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            Metric::ExactMatch => "em",
            Metric::TokenF1 => "f1",
            Metric::Judge { .. } => "judge",
        }
    }

    /// The `{metrics_info}` text for meta prompts.
    pub fn info(&self) -> String {
        match self {
            Metric::ExactMatch => "Exact Match (em): 1.0 if the normalized prediction equals the normalized ground truth (lowercased, punctuation and articles removed, whitespace collapsed), else 0.0. Higher is better.".into(),
            Metric::TokenF1 => "Token F1 (f1): harmonic mean of token precision and recall between the normalized prediction and the normalized ground truth. Higher is better.".into(),
            Metric::Judge { rubric } => format!("LLM judge (judge): a score in [0, 1] assigned by a grader using this rubric: {rubric} Higher is better."),
        }
    }

    pub fn score(&self, engine: &Engine, prediction: &str, truth: &str) -> Result<EvalResult, LlmError> {
        match self {
            Metric::ExactMatch => Ok(exact_match(prediction, truth)),
            Metric::TokenF1 => Ok(token_f1(prediction, truth)),
            Metric::Judge { rubric } => judge(engine, prediction, truth, rubric),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Deserialize)]
struct JudgeReply {
    score: f64,
    #[serde(default)]
    feedback: String,
}

/// Grades `prediction` with the meta model.
pub fn judge(engine: &Engine, prediction: &str, truth: &str, rubric: &str) -> Result<EvalResult, LlmError> {
    let vars = BTreeMap::from([
        ("rubric", rubric.to_string()),
        ("ground_truth", truth.to_string()),
        ("prediction", prediction.to_string()),
    ]);
    let pair = engine
        .templates
        .render(TemplateId::Judge, &vars)
        .map_err(|e| LlmError::Backend(e.to_string()))?;
    let req = engine.client.meta_request(PurposeTag::Judge, &pair.system, &pair.user);
    let (reply, _) = engine.client.complete_json::<JudgeReply>(&req)?;
    let score = if reply.score.is_finite() { reply.score.clamp(0.0, 1.0) } else { 0.0 };
    let mut fb = feedback("judge", score, prediction, truth);
    if !reply.feedback.trim().is_empty() {
        fb.push_str("\nGrader feedback: ");
        fb.push_str(reply.feedback.trim());
    }
    Ok(EvalResult {
        metric_name: "judge".into(),
        score,
        feedback: fb,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}:{line}: duplicate sample id {id:?}")]
    DuplicateId { path: String, line: usize, id: String },
}

/// Reads one split from a JSONL file, preserving file order.
pub fn load_dataset(path: &Path) -> Result<Vec<Sample>, DatasetError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: shown.clone(),
        message: e.to_string(),
    })?;
    parse_dataset(&text, &shown)
}

pub fn parse_dataset(text: &str, origin: &str) -> Result<Vec<Sample>, DatasetError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
            path: origin.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        if sample.question.trim().is_empty() {
            return Err(DatasetError::Parse {
                path: origin.to_string(),
                line: line_no,
                message: "question is empty".into(),
            });
        }
        if !seen.insert(sample.id.clone()) {
            return Err(DatasetError::DuplicateId {
                path: origin.to_string(),
                line: line_no,
                id: sample.id,
            });
        }
        out.push(sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("1865", "1846").score, 0.0);
        assert_eq!(exact_match("1846", "1846").score, 1.0);
        assert_eq!(exact_match(" The 1846. ", "1846").score, 1.0);
        assert!(exact_match("1865", "1846").feedback.contains("does not match"));
    }

    #[test]
    fn token_f1_examples() {
        assert_eq!(token_f1("x y z", "x y z").score, 1.0);
        // precision = recall = 1/2
        assert!((token_f1("x b", "b c").score - 0.5).abs() < 1e-12);
        // "a" is an article and is dropped, leaving "b" vs "b c": p = 1, r = 1/2.
        assert!((token_f1("a b", "b c").score - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_f1("x", "y").score, 0.0);
        assert_eq!(token_f1("", "").score, 1.0);
        assert_eq!(token_f1("", "y").score, 0.0);
    }

    #[test]
    fn metric_names_parse() {
        assert_eq!(Metric::parse("EM"), Some(Metric::ExactMatch));
        assert_eq!(Metric::parse("token_f1"), Some(Metric::TokenF1));
        assert!(Metric::parse("bleu").is_none());
    }

    #[test]
    fn dataset_loading() {
        let ok = "{\"id\":\"a\",\"question\":\"q1\",\"answer\":\"x\"}\n{\"id\":\"b\",\"question\":\"q2\",\"answer\":\"y\",\"context\":\"c\"}\n\n{\"id\":\"c\",\"question\":\"q3\",\"answer\":\"z\"}\n";
        let s = parse_dataset(ok, "t").unwrap();
        assert_eq!(s.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), vec!["a", "b", "c"]);
        assert_eq!(s[1].context.as_deref(), Some("c"));

        let missing = "{\"id\":\"a\",\"question\":\"q\",\"answer\":\"x\"}\n{\"id\":\"b\",\"question\":\"q\"}\n";
        match parse_dataset(missing, "t") {
            Err(DatasetError::Parse { line: 2, message, .. }) => assert!(message.contains("answer")),
            other => panic!("unexpected {other:?}"),
        }

        let dup = "{\"id\":\"a\",\"question\":\"q\",\"answer\":\"x\"}\n{\"id\":\"a\",\"question\":\"r\",\"answer\":\"y\"}\n";
        assert!(matches!(parse_dataset(dup, "t"), Err(DatasetError::DuplicateId { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once);
        }

        #[test]
        fn em_reflexive_and_f1_symmetric(a in "[a-z .,!]{0,30}", b in "[a-z .,!]{0,30}") {
            prop_assert_eq!(exact_match(&a, &a).score, 1.0);
            prop_assert_eq!(token_f1(&a, &b).score, token_f1(&b, &a).score);
            let f = token_f1(&a, &b);
            prop_assert!((0.0..=1.0).contains(&f.score));
            prop_assert!(!f.feedback.is_empty());
        }
    }
}
