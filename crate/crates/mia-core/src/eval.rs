//! Evaluation harness: retrieval recall, answer exact-match and token
//! F1, claim-verification pairwise accuracy, and a batch runner over
//! prediction/gold JSONL files.
//!
//! Answer normalization follows the SQuAD convention (lowercase, strip
//! punctuation, drop English articles, collapse whitespace); CJK text
//! is tokenized per ideograph so Chinese answers score at character
//! granularity.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Tokenizer, WordTokenizer};
use crate::util::{read_jsonl, JsonlError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions file {0}: {1}")]
    Predictions(PathBuf, JsonlError),
    #[error("gold file {0}: {1}")]
    Gold(PathBuf, JsonlError),
    #[error("predictions file is empty: {0}")]
    EmptyPredictions(PathBuf),
    #[error("duplicate qid {qid:?} in {file} (line {line})")]
    DuplicateQid { file: String, qid: String, line: usize },
    #[error("prediction qid {qid:?} has no gold row")]
    MissingGold { qid: String },
    #[error("k values must be positive and non-empty")]
    InvalidK,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Fraction of gold ids found in the first `k` retrieved ids. An empty
/// gold set makes the metric undefined; callers should skip such rows.
pub fn recall_at_k(retrieved: &[String], gold: &HashSet<String>, k: usize) -> Option<f64> {
    if gold.is_empty() {
        return None;
    }
    let top: HashSet<&String> = retrieved.iter().take(k).collect();
    let hit = gold.iter().filter(|g| top.contains(g)).count();
    Some(hit as f64 / gold.len() as f64)
}

/// SQuAD-style normalization: lowercase, strip punctuation, drop the
/// English articles a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn answer_tokens(normalized: &str) -> Vec<String> {
    WordTokenizer
        .token_spans(normalized)
        .into_iter()
        .map(|s| normalized[s.start..s.end].to_string())
        .collect()
}

/// 1 when the normalized prediction equals any normalized gold answer.
pub fn exact_match(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(pred);
    if golds.iter().any(|g| normalize_answer(g) == p) {
        1.0
    } else {
        0.0
    }
}

fn f1_single(pred_tokens: &[String], gold_tokens: &[String]) -> f64 {
    if pred_tokens.is_empty() || gold_tokens.is_empty() {
        return if pred_tokens == gold_tokens { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&String, usize> = HashMap::new();
    for t in gold_tokens {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut same = 0usize;
    for t in pred_tokens {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                same += 1;
            }
        }
    }
    if same == 0 {
        return 0.0;
    }
    let precision = same as f64 / pred_tokens.len() as f64;
    let recall = same as f64 / gold_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Maximum token-multiset F1 of the prediction against any gold
/// answer, after normalization.
pub fn token_f1(pred: &str, golds: &[String]) -> f64 {
    let pred_tokens = answer_tokens(&normalize_answer(pred));
    golds
        .iter()
        .map(|g| f1_single(&pred_tokens, &answer_tokens(&normalize_answer(g))))
        .fold(0.0, f64::max)
}

/// Fraction of claim pairs judged fully correctly: the true claim
/// accepted and its paired false claim rejected.
pub fn pairwise_accuracy(pairs: &[(bool, bool)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let correct = pairs
        .iter()
        .filter(|(true_verdict, false_verdict)| *true_verdict && !*false_verdict)
        .count();
    correct as f64 / pairs.len() as f64
}

/// One prediction row: either a free-text answer or a boolean verdict,
/// plus the ranked retrieval the answer was produced from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub qid: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<bool>,
    #[serde(default)]
    pub retrieved_ids: Vec<String>,
}

/// One gold row: reference answers or a claim label, plus the silver
/// evidence ids for retrieval scoring. `pair_id` links a claim to its
/// minimally-different twin for pairwise accuracy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldRow {
    pub qid: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
    #[serde(default)]
    pub silver_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub dataset: String,
    pub predictions: PathBuf,
    pub gold: PathBuf,
    pub k_values: Vec<usize>,
}

/// The default retrieval cutoffs.
pub const DEFAULT_K_VALUES: [usize; 3] = [3, 5, 10];

/// Per-query metric row in the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRow {
    pub qid: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub em: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub recall: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict_correct: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub k_values: Vec<usize>,
    pub queries: usize,
    /// Queries without gold evidence, excluded from recall means.
    pub recall_skipped: usize,
    pub metrics: BTreeMap<String, f64>,
    pub rows: Vec<QueryRow>,
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Runs every applicable metric over a prediction/gold file pair and
/// assembles the report. Rows are scored independently; means exclude
/// rows where a metric is undefined.
pub fn run_eval(config: &EvalConfig) -> Result<EvalReport, EvalError> {
    if config.k_values.is_empty() || config.k_values.contains(&0) {
        return Err(EvalError::InvalidK);
    }
    let predictions: Vec<PredictionRow> = read_jsonl(&config.predictions)
        .map_err(|e| EvalError::Predictions(config.predictions.clone(), e))?;
    if predictions.is_empty() {
        return Err(EvalError::EmptyPredictions(config.predictions.clone()));
    }
    let gold_rows: Vec<GoldRow> =
        read_jsonl(&config.gold).map_err(|e| EvalError::Gold(config.gold.clone(), e))?;

    let mut seen = HashSet::new();
    for (i, p) in predictions.iter().enumerate() {
        if !seen.insert(p.qid.clone()) {
            return Err(EvalError::DuplicateQid {
                file: config.predictions.display().to_string(),
                qid: p.qid.clone(),
                line: i + 1,
            });
        }
    }
    let mut gold: HashMap<&str, &GoldRow> = HashMap::new();
    for (i, g) in gold_rows.iter().enumerate() {
        if gold.insert(g.qid.as_str(), g).is_some() {
            return Err(EvalError::DuplicateQid {
                file: config.gold.display().to_string(),
                qid: g.qid.clone(),
                line: i + 1,
            });
        }
    }

    let mut rows = Vec::with_capacity(predictions.len());
    let mut ems = Vec::new();
    let mut f1s = Vec::new();
    let mut recalls: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut verdict_hits = Vec::new();
    // pair_id -> (verdict on the true claim, verdict on the false claim)
    let mut pairs: BTreeMap<String, (Option<bool>, Option<bool>)> = BTreeMap::new();
    let mut recall_skipped = 0usize;

    for p in &predictions {
        let g = gold
            .get(p.qid.as_str())
            .ok_or_else(|| EvalError::MissingGold { qid: p.qid.clone() })?;
        let mut row = QueryRow {
            qid: p.qid.clone(),
            em: None,
            f1: None,
            recall: BTreeMap::new(),
            verdict_correct: None,
        };
        if let Some(answers) = &g.answers {
            let pred_text = p.answer.clone().unwrap_or_default();
            let em = exact_match(&pred_text, answers);
            let f1 = token_f1(&pred_text, answers);
            ems.push(em);
            f1s.push(f1);
            row.em = Some(em);
            row.f1 = Some(f1);
        }
        if let Some(label) = g.label {
            let verdict = p.verdict.unwrap_or(false);
            let correct = verdict == label;
            verdict_hits.push(if correct { 1.0 } else { 0.0 });
            row.verdict_correct = Some(correct);
            if let Some(pair_id) = &g.pair_id {
                let slot = pairs.entry(pair_id.clone()).or_insert((None, None));
                if label {
                    slot.0 = Some(verdict);
                } else {
                    slot.1 = Some(verdict);
                }
            }
        }
        let gold_set: HashSet<String> = g.silver_ids.iter().cloned().collect();
        if gold_set.is_empty() {
            recall_skipped += 1;
        } else {
            for &k in &config.k_values {
                let r = recall_at_k(&p.retrieved_ids, &gold_set, k)
                    .expect("nonempty gold set has defined recall");
                recalls.entry(k).or_default().push(r);
                row.recall.insert(format!("recall@{k}"), r);
            }
        }
        rows.push(row);
    }

    let mut metrics = BTreeMap::new();
    if let Some(m) = mean(&ems) {
        metrics.insert("em".to_string(), m);
    }
    if let Some(m) = mean(&f1s) {
        metrics.insert("f1".to_string(), m);
    }
    for (k, vals) in &recalls {
        if let Some(m) = mean(vals) {
            metrics.insert(format!("recall@{k}"), m);
        }
    }
    if let Some(m) = mean(&verdict_hits) {
        metrics.insert("verdict_acc".to_string(), m);
    }
    let complete: Vec<(bool, bool)> = pairs
        .values()
        .filter_map(|(t, f)| Some(((*t)?, (*f)?)))
        .collect();
    let incomplete = pairs.len() - complete.len();
    if incomplete > 0 {
        log::warn!("{incomplete} claim pairs are missing a twin and were skipped");
    }
    if !complete.is_empty() {
        metrics.insert("pairwise_acc".to_string(), pairwise_accuracy(&complete));
    }

    Ok(EvalReport {
        dataset: config.dataset.clone(),
        k_values: config.k_values.clone(),
        queries: predictions.len(),
        recall_skipped,
        metrics,
        rows,
    })
}

/// Renders the report as a plain text table.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("dataset: {}\n", report.dataset));
    out.push_str(&format!("queries: {}\n", report.queries));
    if report.recall_skipped > 0 {
        out.push_str(&format!(
            "queries without gold evidence (recall skipped): {}\n",
            report.recall_skipped
        ));
    }
    out.push_str(&format!("{:<16} {:>10}\n", "metric", "value"));
    for (name, value) in &report.metrics {
        out.push_str(&format!("{:<16} {:>10.4}\n", name, value));
    }
    out
}

/// Writes the report JSON (pretty, trailing newline) and returns the
/// rendered table.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<String, EvalError> {
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    std::fs::write(path, json)?;
    Ok(render_report(report))
}
