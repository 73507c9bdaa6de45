//! End-to-end answer orchestration and SFT-corpus export.
//!
//! The answer path conditions the query on the document's global
//! summary, retrieves chunks, assembles the task's generation prompt
//! (summary first, then chunks in rank order, then the question), calls
//! the generator, and parses a task-specific answer. Parsers are
//! lenient: obvious formats are salvaged, anything else is returned
//! raw and flagged rather than invented.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, AdapterParams};
use crate::embedding::{condition_query, ControlTokens, EmbedError, Embedder, EvidenceKind};
use crate::gateway::prompts::{bindings, render_prompt, PromptError, TemplateId};
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::index::{Collection, IndexError};
use crate::mindscape::Mindscape;
use crate::silver::SilverRecord;

#[derive(Debug, Error)]
pub enum RagError {
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("embedding: {0}")]
    Embed(#[from] EmbedError),
    #[error("index: {0}")]
    Index(#[from] IndexError),
    #[error("adapter: {0}")]
    Adapter(#[from] AdapterError),
    #[error("prompt: {0}")]
    Prompt(#[from] PromptError),
    #[error("chunk {id:?} missing from the chunk store")]
    MissingChunk { id: String },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Generation task families, each with its own prompt template and
/// answer format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    NarrativeQa,
    Detective,
    InfBench,
    NoCha,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::NarrativeQa => "narrativeqa",
            Task::Detective => "detective",
            Task::InfBench => "infbench",
            Task::NoCha => "nocha",
        }
    }

    pub fn from_name(name: &str) -> Option<Task> {
        match name {
            "narrativeqa" => Some(Task::NarrativeQa),
            "detective" => Some(Task::Detective),
            "infbench" => Some(Task::InfBench),
            "nocha" => Some(Task::NoCha),
            _ => None,
        }
    }

    pub fn all() -> [Task; 4] {
        [Task::NarrativeQa, Task::Detective, Task::InfBench, Task::NoCha]
    }

    fn template(self) -> TemplateId {
        match self {
            Task::NarrativeQa => TemplateId::GenNarrativeQa,
            Task::Detective => TemplateId::GenDetective,
            Task::InfBench => TemplateId::GenInfBench,
            Task::NoCha => TemplateId::GenNoCha,
        }
    }
}

/// Renders the generation prompt for a task: instruction + summary
/// block, then the retrieved chunks in rank order, then the question
/// (or claim) block. An empty chunk list produces the summary-only
/// variant used by the no-retrieval baseline.
pub fn assemble_gen_prompt(
    task: Task,
    summary: &str,
    chunk_texts: &[String],
    question: &str,
    options: &str,
) -> Result<String, RagError> {
    let chunks = chunk_texts.join("\n\n");
    let mut pairs = vec![("summary", summary), ("chunks", chunks.as_str())];
    match task {
        Task::NoCha => pairs.push(("claim", question)),
        _ => {
            pairs.push(("question", question));
            pairs.push(("options", options));
        }
    }
    Ok(render_prompt(task.template(), &bindings(&pairs))?)
}

/// A parsed generator completion.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAnswer {
    /// The extracted answer text (raw completion when unparsed).
    pub answer: String,
    /// Claim verdict for verification tasks.
    pub verdict: Option<bool>,
    /// True when no task-format answer could be salvaged.
    pub unparsed: bool,
}

fn parse_detective(completion: &str) -> Option<String> {
    #[derive(Deserialize)]
    struct Reply {
        answer: String,
    }
    let trimmed = completion.trim();
    if let Ok(r) = serde_json::from_str::<Reply>(trimmed) {
        return Some(r.answer);
    }
    // Salvage the first balanced-looking object: try every closing
    // brace from the end back toward the first opening brace.
    let start = trimmed.find('{')?;
    for (end, _) in trimmed.match_indices('}').collect::<Vec<_>>().into_iter().rev() {
        if end > start {
            if let Ok(r) = serde_json::from_str::<Reply>(&trimmed[start..=end]) {
                return Some(r.answer);
            }
        }
    }
    None
}

fn parse_letter(completion: &str) -> Option<char> {
    let trimmed = completion.trim();
    if trimmed.len() == 1 {
        let c = trimmed.chars().next().unwrap().to_ascii_uppercase();
        if ('A'..='D').contains(&c) {
            return Some(c);
        }
    }
    // First standalone capital option letter; lowercase is not
    // salvaged here because "a" is usually the article.
    let bytes = trimmed.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if (b'A'..=b'D').contains(&b) {
            let before_ok = i == 0 || !bytes[i - 1].is_ascii_alphanumeric();
            let after_ok = i + 1 >= bytes.len() || !bytes[i + 1].is_ascii_alphanumeric();
            if before_ok && after_ok {
                return Some(b as char);
            }
        }
    }
    None
}

fn parse_tagged_verdict(completion: &str) -> Option<bool> {
    let start = completion.find("<answer>")? + "<answer>".len();
    let end = completion[start..].find("</answer>")? + start;
    let inner = completion[start..end].trim().to_lowercase();
    if inner.contains("true") {
        Some(true)
    } else if inner.contains("false") {
        Some(false)
    } else {
        None
    }
}

/// Parses a completion according to the task's answer format.
pub fn parse_answer(task: Task, completion: &str) -> ParsedAnswer {
    match task {
        Task::NarrativeQa => {
            let trimmed = completion.trim();
            ParsedAnswer {
                answer: trimmed.to_string(),
                verdict: None,
                unparsed: trimmed.is_empty(),
            }
        }
        Task::Detective => match parse_detective(completion) {
            Some(answer) => ParsedAnswer {
                answer,
                verdict: None,
                unparsed: false,
            },
            None => ParsedAnswer {
                answer: completion.to_string(),
                verdict: None,
                unparsed: true,
            },
        },
        Task::InfBench => match parse_letter(completion) {
            Some(letter) => ParsedAnswer {
                answer: letter.to_string(),
                verdict: None,
                unparsed: false,
            },
            None => ParsedAnswer {
                answer: completion.to_string(),
                verdict: None,
                unparsed: true,
            },
        },
        Task::NoCha => match parse_tagged_verdict(completion) {
            Some(v) => ParsedAnswer {
                answer: if v { "TRUE".into() } else { "FALSE".into() },
                verdict: Some(v),
                unparsed: false,
            },
            None => ParsedAnswer {
                answer: completion.to_string(),
                verdict: None,
                unparsed: true,
            },
        },
    }
}

/// Whether the answer path retrieves chunks or runs on the summary
/// alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerMode {
    Retrieval,
    SummaryOnly,
}

/// Everything `answer_query` produced, including the exact prompt, so
/// runs can be audited and replayed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnswerOutcome {
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<bool>,
    pub retrieved_ids: Vec<String>,
    pub prompt_used: String,
    pub flags: Vec<String>,
}

/// Borrowed handles to every stage the answer path needs.
pub struct RagPipeline<'a> {
    pub gateway: &'a Gateway,
    pub embedder: &'a dyn Embedder,
    pub adapter: Option<&'a AdapterParams>,
    pub mindscape: &'a Mindscape,
    pub chunks: &'a Collection,
    pub control: ControlTokens,
    pub delta: f64,
    pub model_tag: String,
}

impl RagPipeline<'_> {
    fn chunk_text(&self, id: &str) -> Result<String, RagError> {
        let entry = self
            .chunks
            .get(id)
            .ok_or_else(|| RagError::MissingChunk { id: id.to_string() })?;
        String::from_utf8(entry.payload.clone())
            .map_err(|_| RagError::MissingChunk { id: id.to_string() })
    }

    /// Conditioned retrieval, prompt assembly, generation, and answer
    /// parsing for one query.
    pub fn answer_query(
        &self,
        query: &str,
        k: usize,
        task: Task,
        mode: AnswerMode,
    ) -> Result<AnswerOutcome, RagError> {
        let (retrieved_ids, chunk_texts) = match mode {
            AnswerMode::SummaryOnly => (Vec::new(), Vec::new()),
            AnswerMode::Retrieval => {
                let conditioned = condition_query(
                    self.embedder,
                    query,
                    self.mindscape,
                    EvidenceKind::Chunk,
                    self.delta,
                    &self.control,
                )?;
                let scored = match self.adapter {
                    Some(adapter) => adapter.apply(&conditioned.q_tilde)?,
                    None => conditioned.q_tilde,
                };
                let hits = self.chunks.top_k(&scored, k)?;
                let ids: Vec<String> = hits.into_iter().map(|h| h.id).collect();
                let texts = ids
                    .iter()
                    .map(|id| self.chunk_text(id))
                    .collect::<Result<Vec<_>, _>>()?;
                (ids, texts)
            }
        };
        let prompt = assemble_gen_prompt(
            task,
            &self.mindscape.global_summary,
            &chunk_texts,
            query,
            "",
        )?;
        let request = ChatRequest::new(prompt.clone(), &self.model_tag);
        let response = self.gateway.complete(&request)?;
        let parsed = parse_answer(task, &response.text);
        let mut flags = Vec::new();
        if parsed.unparsed {
            flags.push("unparsed".to_string());
        }
        Ok(AnswerOutcome {
            answer: parsed.answer,
            verdict: parsed.verdict,
            retrieved_ids,
            prompt_used: prompt,
            flags,
        })
    }
}

/// Noise-mixing settings for SFT-corpus export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixConfig {
    pub task: Task,
    /// Inclusive range of noise chunks added per example.
    pub noise_range: (usize, usize),
    pub seed: u64,
}

impl MixConfig {
    pub fn new(task: Task, seed: u64) -> Self {
        MixConfig {
            task,
            noise_range: (1, 3),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMeta {
    pub silver_count: usize,
    pub noise_count: usize,
    /// Chunk ids in their final (shuffled) prompt order.
    pub chunk_ids: Vec<String>,
}

/// One generator training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub input: String,
    pub target: String,
    pub task: Task,
    pub meta: SftMeta,
}

/// Builds generator training examples by mixing each record's silver
/// chunks with seeded uniform noise draws from the same document's
/// chunk store and shuffling their order. Records without silver
/// evidence are skipped; the skip count is returned alongside.
pub fn build_sft_examples(
    records: &[SilverRecord],
    chunks: &Collection,
    config: &MixConfig,
) -> Result<(Vec<SftExample>, usize), RagError> {
    let (lo, hi) = config.noise_range;
    if lo > hi {
        return Err(RagError::InvalidConfig(format!(
            "noise range [{lo}, {hi}] is inverted"
        )));
    }
    let all_ids = chunks.ids();
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for (i, record) in records.iter().enumerate() {
        if record.silver_ids.is_empty() {
            skipped += 1;
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(i as u64));
        let noise_target = rng.gen_range(lo..=hi);
        let mut pool: Vec<&String> = all_ids
            .iter()
            .filter(|id| !record.silver_ids.contains(id))
            .collect();
        pool.sort();
        let take = noise_target.min(pool.len());
        let noise: Vec<String> = rand::seq::index::sample(&mut rng, pool.len(), take)
            .into_iter()
            .map(|j| pool[j].clone())
            .collect();
        let mut ids: Vec<String> = record.silver_ids.iter().cloned().chain(noise).collect();
        ids.shuffle(&mut rng);
        let texts = ids
            .iter()
            .map(|id| {
                chunks
                    .get(id)
                    .and_then(|e| String::from_utf8(e.payload.clone()).ok())
                    .ok_or_else(|| RagError::MissingChunk { id: id.clone() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let input = assemble_gen_prompt(config.task, "{summary}", &texts, &record.query, "")?;
        out.push(SftExample {
            input,
            target: record.answer.clone(),
            task: config.task,
            meta: SftMeta {
                silver_count: record.silver_ids.len(),
                noise_count: take,
                chunk_ids: ids,
            },
        });
    }
    Ok((out, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::MockEmbedder;
    use crate::mindscape::Mindscape;

    fn toy_mindscape() -> Mindscape {
        Mindscape {
            doc_id: "book".into(),
            chunk_summaries: vec!["part one".into(), "part two".into()],
            global_summary: "A mock tale of two parts.".into(),
            summarizer_tag: "mock".into(),
            levels: 2,
        }
    }

    fn toy_chunks(embedder: &MockEmbedder, n: usize) -> Collection {
        let mut col = Collection::new("chunks", 16);
        for i in 0..n {
            let text = format!("chunk text {i} about theme {}", i % 3);
            let v = embedder.embed_one(&text).unwrap();
            col.insert(format!("c{i:04}"), v, text.into_bytes()).unwrap();
        }
        col
    }

    #[test]
    fn task_names_round_trip() {
        for task in Task::all() {
            assert_eq!(Task::from_name(task.name()), Some(task));
        }
        assert_eq!(Task::from_name("poetry"), None);
    }

    #[test]
    fn prompt_sections_come_in_pinned_order() {
        let chunks = vec!["first chunk".to_string(), "second chunk".to_string()];
        let prompt =
            assemble_gen_prompt(Task::NarrativeQa, "the summary", &chunks, "who?", "").unwrap();
        let summary_at = prompt.find("## Book Summary: the summary").unwrap();
        let first_at = prompt.find("first chunk").unwrap();
        let second_at = prompt.find("second chunk").unwrap();
        let question_at = prompt.find("## Question: who?").unwrap();
        assert!(summary_at < first_at && first_at < second_at && second_at < question_at);
        assert!(prompt.contains("using a single phrase"));
    }

    #[test]
    fn summary_only_prompt_skips_chunks() {
        let prompt = assemble_gen_prompt(Task::NarrativeQa, "S", &[], "q", "").unwrap();
        assert!(prompt.contains("## Book Summary: S"));
        assert!(prompt.contains("## Relevant Contexts: \n"));
    }

    #[test]
    fn nocha_prompt_binds_the_claim() {
        let prompt =
            assemble_gen_prompt(Task::NoCha, "S", &["ctx".to_string()], "the claim", "").unwrap();
        assert!(prompt.contains("<statement>the claim</statement>"));
        assert!(prompt.contains("<context>ctx</context>"));
    }

    #[test]
    fn letter_parser_salvages_common_shapes() {
        assert_eq!(parse_letter("B"), Some('B'));
        assert_eq!(parse_letter(" b\n"), Some('B'));
        assert_eq!(parse_letter("The answer is C."), Some('C'));
        assert_eq!(parse_letter("Answer: (D)"), Some('D'));
        assert_eq!(parse_letter("no option here"), None);
        assert_eq!(parse_letter("CAB is a word"), None);
    }

    #[test]
    fn detective_parser_reads_json_and_salvages() {
        assert_eq!(
            parse_detective("{\"answer\":\"X\",\"reasoning\":\"because\"}"),
            Some("X".into())
        );
        assert_eq!(
            parse_detective("Sure! {\"answer\":\"Y\",\"reasoning\":\"...\"} hope that helps"),
            Some("Y".into())
        );
        assert_eq!(parse_detective("the butler did it"), None);
    }

    #[test]
    fn verdict_parser_reads_answer_tags() {
        let p = parse_answer(Task::NoCha, "<explanation>ok</explanation>\n<answer>TRUE</answer>");
        assert_eq!(p.verdict, Some(true));
        assert!(!p.unparsed);
        let n = parse_answer(Task::NoCha, "<answer>False</answer>");
        assert_eq!(n.verdict, Some(false));
        let bad = parse_answer(Task::NoCha, "I refuse to answer in the format");
        assert!(bad.unparsed && bad.verdict.is_none());
    }

    #[test]
    fn phrase_parser_flags_empty_completions() {
        assert!(!parse_answer(Task::NarrativeQa, " the captain ").unparsed);
        assert!(parse_answer(Task::NarrativeQa, "   ").unparsed);
    }

    fn pipeline<'a>(
        gateway: &'a Gateway,
        embedder: &'a MockEmbedder,
        mindscape: &'a Mindscape,
        chunks: &'a Collection,
    ) -> RagPipeline<'a> {
        RagPipeline {
            gateway,
            embedder,
            adapter: None,
            mindscape,
            chunks,
            control: ControlTokens::default(),
            delta: 0.5,
            model_tag: "mock-generator".into(),
        }
    }

    #[test]
    fn answer_query_is_deterministic_under_the_mock_gateway() {
        let embedder = MockEmbedder::new(3, 16);
        let mindscape = toy_mindscape();
        let chunks = toy_chunks(&embedder, 12);
        let run = || {
            let gateway = Gateway::mock(42);
            let p = pipeline(&gateway, &embedder, &mindscape, &chunks);
            p.answer_query("who wins?", 4, Task::InfBench, AnswerMode::Retrieval)
                .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.retrieved_ids.len(), 4);
        assert!(["A", "B", "C", "D"].contains(&a.answer.as_str()));
        assert!(a.flags.is_empty());
        assert!(a.prompt_used.contains("## Book Summary: A mock tale of two parts."));
    }

    #[test]
    fn summary_only_mode_retrieves_nothing() {
        let embedder = MockEmbedder::new(3, 16);
        let mindscape = toy_mindscape();
        let chunks = toy_chunks(&embedder, 6);
        let gateway = Gateway::mock(1);
        let p = pipeline(&gateway, &embedder, &mindscape, &chunks);
        let out = p
            .answer_query("what happened?", 5, Task::NarrativeQa, AnswerMode::SummaryOnly)
            .unwrap();
        assert!(out.retrieved_ids.is_empty());
        assert!(out.prompt_used.contains("A mock tale of two parts."));
    }

    #[test]
    fn unparseable_generation_is_flagged_not_invented() {
        let embedder = MockEmbedder::new(3, 16);
        let mindscape = toy_mindscape();
        let chunks = toy_chunks(&embedder, 6);
        let gateway = Gateway::fixed("I will not pick a letter");
        let p = pipeline(&gateway, &embedder, &mindscape, &chunks);
        let out = p
            .answer_query("pick", 2, Task::InfBench, AnswerMode::Retrieval)
            .unwrap();
        assert_eq!(out.flags, vec!["unparsed".to_string()]);
        assert_eq!(out.answer, "I will not pick a letter");
    }

    fn record(qid: usize, silver: &[&str]) -> SilverRecord {
        SilverRecord {
            query: format!("question {qid}"),
            answer: format!("answer {qid}"),
            task: EvidenceKind::Chunk,
            silver_ids: silver.iter().map(|s| s.to_string()).collect(),
            hard_neg_ids: vec![],
            simple_neg_ids: vec![],
            doc_id: "book".into(),
            flags: vec![],
        }
    }

    #[test]
    fn zero_noise_range_embeds_silver_only() {
        let embedder = MockEmbedder::new(8, 16);
        let chunks = toy_chunks(&embedder, 10);
        let config = MixConfig {
            task: Task::NarrativeQa,
            noise_range: (0, 0),
            seed: 4,
        };
        let (examples, skipped) =
            build_sft_examples(&[record(0, &["c0001", "c0004"])], &chunks, &config).unwrap();
        assert_eq!(skipped, 0);
        let ex = &examples[0];
        assert_eq!(ex.meta.noise_count, 0);
        assert_eq!(ex.meta.silver_count, 2);
        let mut ids = ex.meta.chunk_ids.clone();
        ids.sort();
        assert_eq!(ids, vec!["c0001".to_string(), "c0004".to_string()]);
        assert!(ex.input.contains("chunk text 1 ") && ex.input.contains("chunk text 4 "));
    }

    #[test]
    fn fixed_seed_reproduces_the_corpus_exactly() {
        let embedder = MockEmbedder::new(8, 16);
        let chunks = toy_chunks(&embedder, 10);
        let records = vec![
            record(0, &["c0001", "c0004"]),
            record(1, &[]),
            record(2, &["c0002"]),
        ];
        let config = MixConfig::new(Task::Detective, 11);
        let (a, skipped_a) = build_sft_examples(&records, &chunks, &config).unwrap();
        let (b, skipped_b) = build_sft_examples(&records, &chunks, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(skipped_a, 1);
        assert_eq!(skipped_b, 1);
        assert_eq!(a.len(), 2);
        for ex in &a {
            assert!(ex.meta.noise_count >= 1 && ex.meta.noise_count <= 3);
            assert_eq!(ex.meta.chunk_ids.len(), ex.meta.silver_count + ex.meta.noise_count);
        }
    }

    #[test]
    fn missing_chunk_id_is_an_error() {
        let embedder = MockEmbedder::new(8, 16);
        let chunks = toy_chunks(&embedder, 4);
        let config = MixConfig::new(Task::NarrativeQa, 0);
        let err = build_sft_examples(&[record(0, &["c9999"])], &chunks, &config).unwrap_err();
        assert!(matches!(err, RagError::MissingChunk { ref id } if id == "c9999"), "{err}");
    }

    #[test]
    fn silver_positions_are_uniform_across_seeds() {
        // One silver chunk among five total positions; over 1000 seeds
        // its position should be uniform. Chi-squared with 4 degrees of
        // freedom at the 0.01 level: critical value 13.277.
        let embedder = MockEmbedder::new(8, 16);
        let chunks = toy_chunks(&embedder, 12);
        let mut counts = [0usize; 5];
        for seed in 0..1000 {
            let config = MixConfig {
                task: Task::NarrativeQa,
                noise_range: (4, 4),
                seed,
            };
            let (examples, _) =
                build_sft_examples(&[record(0, &["c0003"])], &chunks, &config).unwrap();
            let pos = examples[0]
                .meta
                .chunk_ids
                .iter()
                .position(|id| id == "c0003")
                .unwrap();
            counts[pos] += 1;
        }
        let expected = 1000.0 / 5.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 13.277, "chi-squared {chi2} with counts {counts:?}");
    }

    #[test]
    fn noise_never_leaves_the_records_collection() {
        let embedder = MockEmbedder::new(8, 16);
        let chunks = toy_chunks(&embedder, 8);
        let ids: std::collections::HashSet<String> = chunks.ids().into_iter().collect();
        for seed in 0..20 {
            let config = MixConfig {
                task: Task::NarrativeQa,
                noise_range: (1, 3),
                seed,
            };
            let (examples, _) =
                build_sft_examples(&[record(0, &["c0000"])], &chunks, &config).unwrap();
            for id in &examples[0].meta.chunk_ids {
                assert!(ids.contains(id), "{id} leaked from outside the collection");
            }
        }
    }
}
