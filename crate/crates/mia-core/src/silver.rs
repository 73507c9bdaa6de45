//! Silver evidence annotation.
//!
//! Builds weak supervision for retrieval training: each question/answer
//! pair is expanded into query variants, each variant retrieves a ranked
//! candidate pool from the evidence index, the pools are merged by
//! voting, and an LLM filter keeps the candidates that actually support
//! the answer. Hard and simple negatives are mined around the surviving
//! silver set. Everything downstream of a fixed gateway + embedder +
//! seed is deterministic.

use std::collections::{BTreeSet, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbedError, Embedder, EvidenceKind};
use crate::gateway::prompts::{bindings, render_prompt, PromptError, TemplateId};
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::index::{Collection, IndexError};

/// Ranked pool size retrieved per query variant.
pub const K_RETRIEVE: usize = 10;
/// Candidate count kept after cross-variant voting.
pub const K_SELECT: usize = 10;
/// Cap on hard negatives mined per record.
pub const MAX_HARD_NEGATIVES: usize = 5;
/// Cap on simple (uniform) negatives drawn per record.
pub const MAX_SIMPLE_NEGATIVES: usize = 5;

#[derive(Debug, Error)]
pub enum SilverError {
    #[error("selection size k must be at least 1")]
    InvalidK,
    #[error("query text is empty")]
    EmptyQuery,
    #[error("candidate {id:?} has no text payload in the collection")]
    MissingCandidateText { id: String },
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("embedding: {0}")]
    Embed(#[from] EmbedError),
    #[error("index: {0}")]
    Index(#[from] IndexError),
    #[error("prompt: {0}")]
    Prompt(#[from] PromptError),
}

/// One question/answer pair awaiting annotation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QaPair {
    pub qid: String,
    pub query: String,
    #[serde(default)]
    pub answer: String,
}

/// One annotated record, serialized as a JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilverRecord {
    pub query: String,
    pub answer: String,
    pub task: EvidenceKind,
    pub silver_ids: Vec<String>,
    pub hard_neg_ids: Vec<String>,
    pub simple_neg_ids: Vec<String>,
    pub doc_id: String,
    pub flags: Vec<String>,
}

/// Aggregate counters reported after a full annotation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateStats {
    pub records: usize,
    pub failed: usize,
    pub unfiltered: usize,
    pub avg_silver: f64,
}

/// Expands a question and its answer into retrieval variants:
/// `[q, q + " " + a, a]`, deduplicated in order. An empty answer
/// collapses the list to `[q]`.
pub fn augment_query(q: &str, a: &str) -> Vec<String> {
    let mut variants = Vec::new();
    if a.is_empty() {
        variants.push(q.to_string());
    } else {
        variants.push(q.to_string());
        variants.push(format!("{q} {a}"));
        variants.push(a.to_string());
    }
    let mut seen = HashSet::new();
    variants.retain(|v| seen.insert(v.clone()));
    variants
}

/// Merges ranked candidate pools by voting. Candidates are ordered by
/// vote count (pools containing them) descending, then best rank
/// (minimum position across pools) ascending, then id ascending; the
/// first `k` survive. Empty input yields an empty result.
pub fn vote_select_top_k(pools: &[Vec<String>], k: usize) -> Result<Vec<String>, SilverError> {
    if k == 0 {
        return Err(SilverError::InvalidK);
    }
    // (votes, best_rank) per candidate; a pool votes at most once even
    // if an id somehow repeats within it.
    let mut tally: std::collections::BTreeMap<&str, (usize, usize)> =
        std::collections::BTreeMap::new();
    for pool in pools {
        let mut seen_in_pool = HashSet::new();
        for (rank, id) in pool.iter().enumerate() {
            if !seen_in_pool.insert(id.as_str()) {
                continue;
            }
            let entry = tally.entry(id.as_str()).or_insert((0, rank));
            entry.0 += 1;
            entry.1 = entry.1.min(rank);
        }
    }
    let mut scored: Vec<(&str, usize, usize)> =
        tally.into_iter().map(|(id, (v, r))| (id, v, r)).collect();
    scored.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then(a.2.cmp(&b.2))
            .then(a.0.cmp(b.0))
    });
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(id, _, _)| id.to_string())
        .collect())
}

/// Extracts a JSON integer array from an LLM completion, leniently:
/// a direct parse is tried first, then the first bracketed `[...]`
/// substring. `[-1]` means "nothing relevant" and maps to the empty
/// set; indices outside `[0, len)` are dropped with a warning. Returns
/// `None` when no integer array can be recovered.
pub fn parse_index_array(completion: &str, len: usize) -> Option<Vec<usize>> {
    let trimmed = completion.trim();
    let parsed: Option<Vec<i64>> = serde_json::from_str(trimmed).ok().or_else(|| {
        let start = trimmed.find('[')?;
        let end = trimmed[start..].find(']')? + start;
        serde_json::from_str(&trimmed[start..=end]).ok()
    });
    let raw = parsed?;
    if raw == [-1] {
        return Some(Vec::new());
    }
    let mut kept = BTreeSet::new();
    for v in raw {
        if v >= 0 && (v as usize) < len {
            kept.insert(v as usize);
        } else {
            log::warn!("filter index {v} outside [0, {len}) dropped");
        }
    }
    Some(kept.into_iter().collect())
}

/// Result of the LLM filtering step.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Candidate indices kept as silver evidence, ascending.
    pub silver_indices: Vec<usize>,
    /// True when the completion never parsed and all candidates were
    /// kept as provisional silver.
    pub unfiltered: bool,
}

fn format_candidates(texts: &[String]) -> String {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| format!("[{i}] {t}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Asks the LLM which candidates support the answer. On a parse
/// failure the identical request is asked once more; if that also
/// fails to parse, every candidate is kept and the outcome is marked
/// unfiltered.
pub fn filter_with_llm(
    gateway: &Gateway,
    query: &str,
    answer: &str,
    candidate_texts: &[String],
    kind: EvidenceKind,
    model_tag: &str,
) -> Result<FilterOutcome, SilverError> {
    let (template, list_binding) = match kind {
        EvidenceKind::Chunk => (TemplateId::FilterChunks, "chunks"),
        EvidenceKind::Node => (TemplateId::FilterNodes, "entities"),
    };
    let listing = format_candidates(candidate_texts);
    let user = render_prompt(
        template,
        &bindings(&[
            ("question", query),
            ("answer", answer),
            (list_binding, &listing),
        ]),
    )?;
    let request = ChatRequest::new(user, model_tag);
    for attempt in 0..2 {
        let response = gateway.complete(&request)?;
        match parse_index_array(&response.text, candidate_texts.len()) {
            Some(indices) => {
                return Ok(FilterOutcome {
                    silver_indices: indices,
                    unfiltered: false,
                })
            }
            None => log::warn!(
                "filter completion did not parse (attempt {}): {:?}",
                attempt + 1,
                response.text
            ),
        }
    }
    Ok(FilterOutcome {
        silver_indices: (0..candidate_texts.len()).collect(),
        unfiltered: true,
    })
}

/// Mines negatives around a silver set. Hard negatives are the first
/// (at most five) voted candidates that the filter rejected, in
/// candidate order; simple negatives are up to five uniform seeded
/// draws from the rest of the collection. The three sets are pairwise
/// disjoint by construction.
pub fn build_negatives(
    silver_ids: &[String],
    candidate_ids: &[String],
    all_ids: &[String],
    seed: u64,
) -> (Vec<String>, Vec<String>) {
    let silver: HashSet<&str> = silver_ids.iter().map(String::as_str).collect();
    let hard: Vec<String> = candidate_ids
        .iter()
        .filter(|id| !silver.contains(id.as_str()))
        .take(MAX_HARD_NEGATIVES)
        .cloned()
        .collect();
    let excluded: HashSet<&str> = silver
        .iter()
        .copied()
        .chain(hard.iter().map(String::as_str))
        .collect();
    // Canonical pool order makes the draw independent of collection
    // insertion order.
    let mut pool: Vec<&String> = all_ids
        .iter()
        .filter(|id| !excluded.contains(id.as_str()))
        .collect();
    pool.sort();
    pool.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = MAX_SIMPLE_NEGATIVES.min(pool.len());
    let simple = rand::seq::index::sample(&mut rng, pool.len(), take)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect();
    (hard, simple)
}

/// Settings for a full annotation run.
#[derive(Debug, Clone)]
pub struct AnnotateConfig {
    pub k_retrieve: usize,
    pub k_select: usize,
    pub seed: u64,
    pub model_tag: String,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        AnnotateConfig {
            k_retrieve: K_RETRIEVE,
            k_select: K_SELECT,
            seed: 0,
            model_tag: "annotator".to_string(),
        }
    }
}

fn candidate_text(collection: &Collection, id: &str) -> Result<String, SilverError> {
    let entry = collection
        .get(id)
        .ok_or_else(|| SilverError::MissingCandidateText { id: id.to_string() })?;
    String::from_utf8(entry.payload.clone())
        .ok()
        .filter(|t| !t.is_empty())
        .ok_or_else(|| SilverError::MissingCandidateText { id: id.to_string() })
}

fn annotate_one(
    gateway: &Gateway,
    embedder: &dyn Embedder,
    collection: &Collection,
    all_ids: &[String],
    pair: &QaPair,
    kind: EvidenceKind,
    doc_id: &str,
    config: &AnnotateConfig,
    record_seed: u64,
) -> Result<(SilverRecord, bool), SilverError> {
    if pair.query.trim().is_empty() {
        return Err(SilverError::EmptyQuery);
    }
    let variants = augment_query(&pair.query, &pair.answer);
    let mut pools = Vec::with_capacity(variants.len());
    for variant in &variants {
        let embedded = embedder.embed_one(variant)?;
        let hits = collection.top_k(&embedded, config.k_retrieve)?;
        pools.push(hits.into_iter().map(|s| s.id).collect::<Vec<_>>());
    }
    let candidate_ids = vote_select_top_k(&pools, config.k_select)?;
    let (silver_ids, unfiltered) = if candidate_ids.is_empty() {
        (Vec::new(), false)
    } else {
        let texts = candidate_ids
            .iter()
            .map(|id| candidate_text(collection, id))
            .collect::<Result<Vec<_>, _>>()?;
        let outcome = filter_with_llm(
            gateway,
            &pair.query,
            &pair.answer,
            &texts,
            kind,
            &config.model_tag,
        )?;
        let ids = outcome
            .silver_indices
            .iter()
            .map(|&i| candidate_ids[i].clone())
            .collect();
        (ids, outcome.unfiltered)
    };
    let (hard, simple) = build_negatives(&silver_ids, &candidate_ids, all_ids, record_seed);
    let mut flags = Vec::new();
    if unfiltered {
        flags.push("unfiltered".to_string());
    }
    Ok((
        SilverRecord {
            query: pair.query.clone(),
            answer: pair.answer.clone(),
            task: kind,
            silver_ids,
            hard_neg_ids: hard,
            simple_neg_ids: simple,
            doc_id: doc_id.to_string(),
            flags,
        },
        unfiltered,
    ))
}

/// Annotates a whole QA set against one evidence collection. Records
/// are processed concurrently up to the gateway's parallelism but
/// emitted in input order; a failing record is emitted with empty
/// evidence sets and a `failed` flag so the run continues.
pub fn annotate_corpus(
    gateway: &Gateway,
    embedder: &dyn Embedder,
    collection: &Collection,
    qa_pairs: &[QaPair],
    kind: EvidenceKind,
    doc_id: &str,
    config: &AnnotateConfig,
) -> Result<(Vec<SilverRecord>, AnnotateStats), SilverError> {
    if config.k_retrieve == 0 || config.k_select == 0 {
        return Err(SilverError::InvalidK);
    }
    let all_ids = collection.ids();
    let run_one = |(i, pair): (usize, &QaPair)| -> (SilverRecord, bool, bool) {
        let record_seed = config.seed.wrapping_add(i as u64);
        match annotate_one(
            gateway, embedder, collection, &all_ids, pair, kind, doc_id, config, record_seed,
        ) {
            Ok((record, unfiltered)) => (record, unfiltered, false),
            Err(err) => {
                log::warn!("annotation failed for {:?}: {err}", pair.qid);
                let record = SilverRecord {
                    query: pair.query.clone(),
                    answer: pair.answer.clone(),
                    task: kind,
                    silver_ids: Vec::new(),
                    hard_neg_ids: Vec::new(),
                    simple_neg_ids: Vec::new(),
                    doc_id: doc_id.to_string(),
                    flags: vec!["failed".to_string()],
                };
                (record, false, true)
            }
        }
    };
    let parallelism = gateway.parallelism();
    let results: Vec<(SilverRecord, bool, bool)> = if parallelism <= 1 || qa_pairs.len() <= 1 {
        qa_pairs.iter().enumerate().map(run_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .expect("thread pool");
        pool.install(|| {
            use rayon::prelude::*;
            qa_pairs.par_iter().enumerate().map(run_one).collect()
        })
    };
    let records: Vec<SilverRecord> = results.iter().map(|(r, _, _)| r.clone()).collect();
    let unfiltered = results.iter().filter(|(_, u, _)| *u).count();
    let failed = results.iter().filter(|(_, _, f)| *f).count();
    let avg_silver = if records.is_empty() {
        0.0
    } else {
        records.iter().map(|r| r.silver_ids.len()).sum::<usize>() as f64 / records.len() as f64
    };
    let stats = AnnotateStats {
        records: records.len(),
        failed,
        unfiltered,
        avg_silver,
    };
    log::info!(
        "annotated {} records ({} failed, {} unfiltered), avg {:.2} silver ids",
        stats.records,
        stats.failed,
        stats.unfiltered,
        stats.avg_silver
    );
    Ok((records, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::MockEmbedder;
    use proptest::prelude::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn augment_builds_three_variants() {
        assert_eq!(
            augment_query("Who dies?", "Ahab"),
            vec!["Who dies?", "Who dies? Ahab", "Ahab"]
        );
    }

    #[test]
    fn augment_collapses_empty_answer() {
        assert_eq!(augment_query("Who dies?", ""), vec!["Who dies?"]);
    }

    #[test]
    fn augment_dedups_identical_question_and_answer() {
        assert_eq!(augment_query("x", "x"), vec!["x", "x x"]);
    }

    #[test]
    fn vote_prefers_count_then_rank_then_id() {
        let pools = vec![ids(&["a", "b"]), ids(&["a", "c"]), ids(&["a", "d"])];
        assert_eq!(vote_select_top_k(&pools, 2).unwrap(), ids(&["a", "b"]));
    }

    #[test]
    fn vote_on_identical_pools_is_a_prefix() {
        let pool = ids(&["x", "y", "z"]);
        let pools = vec![pool.clone(), pool.clone(), pool.clone()];
        assert_eq!(vote_select_top_k(&pools, 2).unwrap(), ids(&["x", "y"]));
        assert_eq!(vote_select_top_k(&pools, 10).unwrap(), pool);
    }

    #[test]
    fn vote_with_single_pool_returns_its_top_k() {
        let pools = vec![ids(&["m", "a", "z", "b"])];
        assert_eq!(vote_select_top_k(&pools, 3).unwrap(), ids(&["m", "a", "z"]));
    }

    #[test]
    fn vote_breaks_full_ties_by_id() {
        // Disjoint pools: every candidate has one vote; the rank-0
        // candidates tie and the smallest id wins.
        let pools = vec![ids(&["d", "e"]), ids(&["b", "f"]), ids(&["c", "g"])];
        assert_eq!(vote_select_top_k(&pools, 1).unwrap(), ids(&["b"]));
    }

    #[test]
    fn vote_rejects_zero_k_and_accepts_empty_pools() {
        assert!(matches!(
            vote_select_top_k(&[], 0),
            Err(SilverError::InvalidK)
        ));
        assert!(vote_select_top_k(&[], 3).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn vote_is_invariant_under_pool_permutation(perm in proptest::sample::subsequence(vec![0usize,1,2,3], 4)) {
            let pools = vec![
                ids(&["a", "b", "c"]),
                ids(&["b", "a"]),
                ids(&["c", "d", "a"]),
                ids(&["d"]),
            ];
            let mut shuffled: Vec<Vec<String>> = perm.iter().map(|&i| pools[i].clone()).collect();
            for (i, p) in pools.iter().enumerate() {
                if !perm.contains(&i) {
                    shuffled.push(p.clone());
                }
            }
            prop_assert_eq!(
                vote_select_top_k(&pools, 3).unwrap(),
                vote_select_top_k(&shuffled, 3).unwrap()
            );
        }
    }

    #[test]
    fn parse_accepts_plain_and_salvaged_arrays() {
        assert_eq!(parse_index_array("[0,2,5]", 6), Some(vec![0, 2, 5]));
        assert_eq!(parse_index_array("relevant: [1]", 3), Some(vec![1]));
        assert_eq!(parse_index_array("Relevant indices: [0]", 3), Some(vec![0]));
        assert_eq!(parse_index_array("  [0, 1]\n", 2), Some(vec![0, 1]));
    }

    #[test]
    fn parse_maps_minus_one_to_empty() {
        assert_eq!(parse_index_array("[-1]", 5), Some(vec![]));
    }

    #[test]
    fn parse_drops_out_of_range_indices() {
        assert_eq!(parse_index_array("[0, 99, -3]", 3), Some(vec![0]));
    }

    #[test]
    fn parse_rejects_prose_without_an_array() {
        assert_eq!(parse_index_array("I think chunk two is best.", 5), None);
        assert_eq!(parse_index_array("[not, numbers]", 5), None);
    }

    #[test]
    fn filter_flags_unfiltered_after_two_parse_failures() {
        let gateway = Gateway::fixed("definitely not an array");
        let texts = vec!["alpha".to_string(), "beta".to_string()];
        let out =
            filter_with_llm(&gateway, "q", "a", &texts, EvidenceKind::Chunk, "tag").unwrap();
        assert!(out.unfiltered);
        assert_eq!(out.silver_indices, vec![0, 1]);
    }

    #[test]
    fn filter_recovers_on_second_attempt() {
        let gateway = Gateway::scripted(1, vec!["prose only".into(), "[1]".into()]);
        let texts = vec!["alpha".to_string(), "beta".to_string()];
        let out =
            filter_with_llm(&gateway, "q", "a", &texts, EvidenceKind::Chunk, "tag").unwrap();
        assert!(!out.unfiltered);
        assert_eq!(out.silver_indices, vec![1]);
    }

    #[test]
    fn negatives_vanish_when_filter_keeps_everything() {
        let silver = ids(&["a", "b"]);
        let (hard, simple) = build_negatives(&silver, &silver.clone(), &ids(&["a", "b", "c"]), 7);
        assert!(hard.is_empty());
        assert_eq!(simple, ids(&["c"]));
    }

    #[test]
    fn negatives_exhaust_a_small_corpus() {
        let all = ids(&["a", "b", "c", "d", "e", "f", "g", "h"]);
        let silver = ids(&["a", "b"]);
        let candidates = ids(&["a", "b", "c", "d", "e"]);
        let (hard, simple) = build_negatives(&silver, &candidates, &all, 3);
        assert_eq!(hard, ids(&["c", "d", "e"]));
        let mut rest = simple.clone();
        rest.sort();
        assert_eq!(rest, ids(&["f", "g", "h"]));
    }

    #[test]
    fn simple_negatives_are_seed_deterministic() {
        let all: Vec<String> = (0..50).map(|i| format!("c{i:04}")).collect();
        let silver = ids(&["c0001"]);
        let candidates = ids(&["c0001", "c0002"]);
        let (_, s1) = build_negatives(&silver, &candidates, &all, 42);
        let (_, s2) = build_negatives(&silver, &candidates, &all, 42);
        let (_, s3) = build_negatives(&silver, &candidates, &all, 43);
        assert_eq!(s1, s2);
        assert_ne!(s1, s3, "different seeds should draw differently here");
        assert_eq!(s1.len(), MAX_SIMPLE_NEGATIVES);
    }

    proptest! {
        #[test]
        fn negative_sets_are_pairwise_disjoint(
            n in 1usize..40,
            silver_picks in proptest::collection::vec(0usize..40, 0..6),
            cand_picks in proptest::collection::vec(0usize..40, 0..12),
            seed in any::<u64>(),
        ) {
            let all: Vec<String> = (0..n).map(|i| format!("u{i:03}")).collect();
            let mut silver: Vec<String> = silver_picks.iter().map(|&i| all[i % n].clone()).collect();
            silver.sort();
            silver.dedup();
            let mut candidates: Vec<String> = cand_picks.iter().map(|&i| all[i % n].clone()).collect();
            candidates.dedup();
            let (hard, simple) = build_negatives(&silver, &candidates, &all, seed);
            let s: HashSet<&String> = silver.iter().collect();
            let h: HashSet<&String> = hard.iter().collect();
            let m: HashSet<&String> = simple.iter().collect();
            prop_assert!(s.is_disjoint(&h));
            prop_assert!(s.is_disjoint(&m));
            prop_assert!(h.is_disjoint(&m));
            prop_assert!(hard.len() <= MAX_HARD_NEGATIVES);
            prop_assert!(simple.len() <= MAX_SIMPLE_NEGATIVES);
        }
    }

    fn toy_collection(embedder: &MockEmbedder, n: usize) -> Collection {
        let mut col = Collection::new("chunks", 16);
        for i in 0..n {
            let id = format!("c{i:04}");
            let text = format!("chunk {i} talks about topic {}", i % 5);
            let vec = embedder.embed_one(&text).unwrap();
            col.insert(id, vec, text.into_bytes()).unwrap();
        }
        col
    }

    #[test]
    fn fixed_zero_reply_keeps_exactly_the_top_voted_candidate() {
        let embedder = MockEmbedder::new(9, 16);
        let col = toy_collection(&embedder, 20);
        let gateway = Gateway::fixed("[0]");
        let pairs = vec![
            QaPair {
                qid: "q1".into(),
                query: "what is topic 3".into(),
                answer: "topic 3".into(),
            },
            QaPair {
                qid: "q2".into(),
                query: "where is chunk 7".into(),
                answer: "".into(),
            },
        ];
        let (records, stats) = annotate_corpus(
            &gateway,
            &embedder,
            &col,
            &pairs,
            EvidenceKind::Chunk,
            "book",
            &AnnotateConfig::default(),
        )
        .unwrap();
        assert_eq!(records.len(), 2);
        for r in &records {
            assert_eq!(r.silver_ids.len(), 1, "fixed [0] keeps one candidate");
            assert!(r.flags.is_empty());
            assert_eq!(r.doc_id, "book");
        }
        assert!((stats.avg_silver - 1.0).abs() < 1e-12);
        assert_eq!(stats.failed, 0);
    }

    #[test]
    fn annotation_is_byte_deterministic_and_disjoint() {
        let embedder = MockEmbedder::new(5, 16);
        let col = toy_collection(&embedder, 30);
        let pairs: Vec<QaPair> = (0..8)
            .map(|i| QaPair {
                qid: format!("q{i}"),
                query: format!("question about topic {}", i % 4),
                answer: format!("answer {i}"),
            })
            .collect();
        let run = || {
            let gateway = Gateway::mock(777);
            let (records, _) = annotate_corpus(
                &gateway,
                &embedder,
                &col,
                &pairs,
                EvidenceKind::Chunk,
                "book",
                &AnnotateConfig::default(),
            )
            .unwrap();
            let mut bytes = Vec::new();
            for r in &records {
                bytes.extend(serde_json::to_vec(r).unwrap());
                bytes.push(b'\n');
            }
            (records, bytes)
        };
        let (records, bytes_a) = run();
        let (_, bytes_b) = run();
        assert_eq!(bytes_a, bytes_b, "two runs must serialize identically");
        for r in &records {
            let s: HashSet<&String> = r.silver_ids.iter().collect();
            let h: HashSet<&String> = r.hard_neg_ids.iter().collect();
            let m: HashSet<&String> = r.simple_neg_ids.iter().collect();
            assert!(s.is_disjoint(&h) && s.is_disjoint(&m) && h.is_disjoint(&m));
            assert!(r.hard_neg_ids.len() <= MAX_HARD_NEGATIVES);
            assert!(r.simple_neg_ids.len() <= MAX_SIMPLE_NEGATIVES);
        }
    }

    #[test]
    fn failing_record_is_isolated_with_a_flag() {
        let embedder = MockEmbedder::new(5, 16);
        let col = toy_collection(&embedder, 10);
        let gateway = Gateway::fixed("[0]");
        let pairs = vec![
            QaPair {
                qid: "bad".into(),
                query: "   ".into(),
                answer: "x".into(),
            },
            QaPair {
                qid: "good".into(),
                query: "a real question".into(),
                answer: "yes".into(),
            },
        ];
        let (records, stats) = annotate_corpus(
            &gateway,
            &embedder,
            &col,
            &pairs,
            EvidenceKind::Chunk,
            "book",
            &AnnotateConfig::default(),
        )
        .unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].flags, vec!["failed".to_string()]);
        assert!(records[0].silver_ids.is_empty());
        assert!(records[1].flags.is_empty());
        assert_eq!(stats.failed, 1);
    }

    #[test]
    fn node_task_renders_the_entity_filter_prompt() {
        let embedder = MockEmbedder::new(11, 16);
        let mut col = Collection::new("nodes", 16);
        for (name, desc) in [("Ahab", "a captain"), ("Ishmael", "the narrator")] {
            let text = format!("{name}: {desc}");
            let vec = embedder.embed_one(&text).unwrap();
            col.insert(name.to_string(), vec, text.into_bytes()).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let audit = dir.path().join("audit.jsonl");
        let gateway = Gateway::fixed("[0]").with_audit_log(&audit).unwrap();
        let pairs = vec![QaPair {
            qid: "q".into(),
            query: "who leads the ship".into(),
            answer: "Ahab".into(),
        }];
        let (records, _) = annotate_corpus(
            &gateway,
            &embedder,
            &col,
            &pairs,
            EvidenceKind::Node,
            "book",
            &AnnotateConfig::default(),
        )
        .unwrap();
        assert_eq!(records[0].task, EvidenceKind::Node);
        let log = std::fs::read_to_string(&audit).unwrap();
        assert!(log.contains("Entities (indexed from 0)"));
        assert!(log.contains("Ahab: a captain"));
    }
}
