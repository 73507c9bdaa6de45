//! Mindscape construction: bottom-up hierarchical summarization and
//! entity-node extraction.
//!
//! Every chunk is summarized individually, then the ordered summaries
//! are reduced to a single global summary. When the concatenated
//! summaries fit the token budget this is one reduce call (two levels
//! total); otherwise the summaries are greedily grouped into contiguous
//! budget-sized batches, each batch is summarized, and the procedure
//! recurses on the batch summaries. Each reduction round must strictly
//! shrink the list, so termination is guaranteed or reported as a
//! too-small budget.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{count_tokens, Chunk};
use crate::gateway::prompts::{bindings, render_prompt, PromptError, TemplateId};
use crate::gateway::{ChatRequest, Gateway, GatewayError};

/// Hierarchical summary state for one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mindscape {
    pub doc_id: String,
    pub chunk_summaries: Vec<String>,
    pub global_summary: String,
    pub summarizer_tag: String,
    /// Summary hierarchy depth: 2 for the direct path (chunk summaries
    /// plus one reduce call), plus one per extra grouping round.
    pub levels: u32,
}

/// An extracted entity with its description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub desc: String,
    pub doc_id: String,
}

impl Node {
    /// Rendered form used as the node's evidence text in indexes and
    /// filter prompts.
    pub fn evidence_text(&self) -> String {
        format!("{}: {}", self.name, self.desc)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MindscapeError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("summarizer returned an empty completion twice for {context}")]
    EmptyCompletion { context: String },
    #[error("no summaries to reduce")]
    EmptySummaries,
    #[error("budget {budget} cannot group the current summaries any further")]
    BudgetTooSmall { budget: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed mindscape file {path}: {source}")]
    Malformed {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Drives summarization and entity extraction through a gateway.
pub struct MindscapeBuilder<'a> {
    gateway: &'a Gateway,
    model_tag: String,
}

impl<'a> MindscapeBuilder<'a> {
    pub fn new(gateway: &'a Gateway, model_tag: impl Into<String>) -> Self {
        MindscapeBuilder { gateway, model_tag: model_tag.into() }
    }

    /// Sends one completion; an empty reply is retried once, then fatal.
    fn complete_text(&self, user: String, context: &str) -> Result<String, MindscapeError> {
        let req = ChatRequest::new(user, self.model_tag.clone());
        for attempt in 0..2 {
            match self.gateway.complete(&req) {
                Ok(resp) if resp.text.trim().is_empty() => {
                    log::warn!("empty completion for {context} (attempt {attempt})");
                }
                Ok(resp) => return Ok(resp.text),
                Err(GatewayError::EmptyCompletion) => {
                    log::warn!("empty completion for {context} (attempt {attempt})");
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(MindscapeError::EmptyCompletion { context: context.to_string() })
    }

    /// Summarizes one chunk with the chunk-level template.
    pub fn summarize_chunk(&self, chunk: &Chunk) -> Result<String, MindscapeError> {
        let prompt = render_prompt(TemplateId::SumChunk, &bindings(&[("chunk_content", &chunk.text)]))?;
        self.complete_text(prompt, &format!("chunk {} of {}", chunk.index, chunk.doc_id))
    }

    /// Summarizes all chunks, in order. Requests run concurrently up to
    /// the gateway's configured parallelism; results are re-assembled by
    /// chunk index so the output order never depends on scheduling.
    pub fn summarize_chunks(&self, chunks: &[Chunk]) -> Result<Vec<String>, MindscapeError> {
        let parallelism = self.gateway.parallelism();
        if parallelism <= 1 || chunks.len() <= 1 {
            return chunks.iter().map(|c| self.summarize_chunk(c)).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .expect("thread pool");
        pool.install(|| {
            use rayon::prelude::*;
            chunks.par_iter().map(|c| self.summarize_chunk(c)).collect()
        })
    }

    fn reduce_group(&self, group: &[String]) -> Result<String, MindscapeError> {
        let concatenated = group.join("\n\n");
        let prompt = render_prompt(
            TemplateId::SumGlobal,
            &bindings(&[("concatenated_summaries", &concatenated)]),
        )?;
        self.complete_text(prompt, "summary reduction")
    }

    /// Reduces ordered chunk summaries to the global summary. Returns
    /// the summary and the total level count (chunk-summary level plus
    /// one per reduce round).
    pub fn build_global_summary(
        &self,
        summaries: &[String],
        budget: usize,
    ) -> Result<(String, u32), MindscapeError> {
        if summaries.is_empty() {
            return Err(MindscapeError::EmptySummaries);
        }
        let mut current: Vec<String> = summaries.to_vec();
        let mut levels = 1u32; // the chunk-summary level itself
        loop {
            let total: usize = current.iter().map(|s| count_tokens(s)).sum();
            if total <= budget || current.len() == 1 {
                let global = self.reduce_group(&current)?;
                return Ok((global, levels + 1));
            }
            let groups = group_by_budget(&current, budget);
            if groups.len() >= current.len() {
                // Every summary exceeds the budget on its own; another
                // round would not shrink the list.
                return Err(MindscapeError::BudgetTooSmall { budget });
            }
            current = groups
                .iter()
                .map(|g| self.reduce_group(g))
                .collect::<Result<Vec<_>, _>>()?;
            levels += 1;
        }
    }

    /// Full construction for one document.
    pub fn build(
        &self,
        doc_id: &str,
        chunks: &[Chunk],
        budget: usize,
    ) -> Result<Mindscape, MindscapeError> {
        let chunk_summaries = self.summarize_chunks(chunks)?;
        let (global_summary, levels) = self.build_global_summary(&chunk_summaries, budget)?;
        Ok(Mindscape {
            doc_id: doc_id.to_string(),
            chunk_summaries,
            global_summary,
            summarizer_tag: self.model_tag.clone(),
            levels,
        })
    }

    /// Extracts entity nodes from every chunk and deduplicates them by
    /// case-folded name, keeping the longest description. A completion
    /// that yields no parseable line is logged and skipped.
    pub fn extract_entities(&self, chunks: &[Chunk]) -> Result<Vec<Node>, MindscapeError> {
        let mut nodes: Vec<Node> = Vec::new();
        let mut by_name: HashMap<String, usize> = HashMap::new();
        for chunk in chunks {
            let prompt =
                render_prompt(TemplateId::ExtractEntities, &bindings(&[("chunk_content", &chunk.text)]))?;
            let text =
                self.complete_text(prompt, &format!("entities of chunk {}", chunk.index))?;
            let parsed = parse_entity_lines(&text);
            if parsed.is_empty() {
                log::warn!(
                    "no parseable entity lines in completion for chunk {} of {}; skipping",
                    chunk.index,
                    chunk.doc_id
                );
                continue;
            }
            for (name, desc) in parsed {
                let key = name.to_lowercase();
                match by_name.get(&key) {
                    Some(&i) => {
                        if desc.len() > nodes[i].desc.len() {
                            nodes[i] = Node { name, desc, doc_id: chunk.doc_id.clone() };
                        }
                    }
                    None => {
                        by_name.insert(key, nodes.len());
                        nodes.push(Node { name, desc, doc_id: chunk.doc_id.clone() });
                    }
                }
            }
        }
        Ok(nodes)
    }
}

/// Greedy contiguous grouping: summaries are packed in order until the
/// next one would push the group past the budget. A summary larger than
/// the whole budget forms its own group.
fn group_by_budget(summaries: &[String], budget: usize) -> Vec<Vec<String>> {
    let mut groups: Vec<Vec<String>> = Vec::new();
    let mut group: Vec<String> = Vec::new();
    let mut acc = 0usize;
    for s in summaries {
        let tokens = count_tokens(s);
        if !group.is_empty() && acc + tokens > budget {
            groups.push(std::mem::take(&mut group));
            acc = 0;
        }
        acc += tokens;
        group.push(s.clone());
    }
    if !group.is_empty() {
        groups.push(group);
    }
    groups
}

/// Parses "name: description" lines; lines without a colon or with an
/// empty name are ignored.
fn parse_entity_lines(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|line| {
            let (name, desc) = line.split_once(':')?;
            let name = name.trim();
            let desc = desc.trim();
            if name.is_empty() || desc.is_empty() {
                return None;
            }
            Some((name.to_string(), desc.to_string()))
        })
        .collect()
}

/// Persists a mindscape as pretty-printed JSON (byte-stable for a fixed
/// input).
pub fn save_mindscape(path: &Path, ms: &Mindscape) -> Result<(), MindscapeError> {
    let json = serde_json::to_string_pretty(ms).expect("mindscape serializes");
    std::fs::write(path, json + "\n").map_err(|e| MindscapeError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_mindscape(path: &Path) -> Result<Mindscape, MindscapeError> {
    let bytes = std::fs::read_to_string(path).map_err(|e| MindscapeError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&bytes).map_err(|e| MindscapeError::Malformed {
        path: path.display().to_string(),
        source: e,
    })
}

/// Nodes persisted as JSONL.
pub fn save_nodes(path: &Path, nodes: &[Node]) -> Result<(), crate::util::JsonlError> {
    crate::util::write_jsonl(path, nodes)
}

pub fn load_nodes(path: &Path) -> Result<Vec<Node>, crate::util::JsonlError> {
    crate::util::read_jsonl(path)
}
