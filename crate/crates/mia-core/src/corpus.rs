//! Document ingestion and sliding-window chunking.
//!
//! Token counting is intentionally approximate: the pipeline only needs a
//! stable, cheap notion of "token" for chunk boundaries and summary
//! budgets, not the exact vocabulary of any particular model. The default
//! [`WordTokenizer`] uses Unicode word segmentation and counts every CJK
//! ideograph as a single token, so Chinese corpora chunk at character
//! granularity while alphabetic text chunks at word granularity.
//!
//! Chunking slides a window of `size` tokens with `size - overlap` stride.
//! Every token lands in at least one chunk; adjacent chunks share exactly
//! `overlap` tokens except possibly the final pair, which may share fewer
//! when the tail is short.

use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

use crate::util::{read_jsonl, write_jsonl, JsonlError};

/// Document language, used to pick tokenization behaviour in metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    En,
    Zh,
    #[default]
    Other,
}

/// A raw document as ingested from a corpus JSONL file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
    #[serde(default)]
    pub lang: Lang,
}

/// A contiguous token window of a document.
///
/// `start` and `end` are a half-open span in token units over the
/// document's token stream; `text` is the corresponding slice of the
/// original text (first token's start byte through last token's end byte).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub token_count: usize,
}

impl Chunk {
    /// Stable chunk identifier used as the vector-index entry id.
    /// Zero-padded so lexicographic order matches chunk order.
    pub fn id_str(&self) -> String {
        format!("c{:04}", self.index)
    }
}

/// Byte span of a single token within the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

/// Pluggable tokenizer. Implementations must be deterministic and return
/// non-overlapping spans in ascending order.
pub trait Tokenizer {
    fn token_spans(&self, text: &str) -> Vec<TokenSpan>;

    fn count_tokens(&self, text: &str) -> usize {
        self.token_spans(text).len()
    }
}

/// Default tokenizer: Unicode word segmentation with CJK ideographs
/// split out as one token each. Whitespace and punctuation are skipped.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordTokenizer;

fn is_cjk_ideograph(c: char) -> bool {
    matches!(u32::from(c),
        0x3400..=0x4DBF       // CJK extension A
        | 0x4E00..=0x9FFF     // CJK unified
        | 0xF900..=0xFAFF     // CJK compatibility
        | 0x20000..=0x2EBEF   // CJK extensions B..F
    )
}

impl Tokenizer for WordTokenizer {
    fn token_spans(&self, text: &str) -> Vec<TokenSpan> {
        let mut spans = Vec::new();
        for (offset, word) in text.unicode_word_indices() {
            // Split CJK ideographs out of each word segment so that they
            // always count one apiece, regardless of segmenter grouping.
            let mut run_start: Option<usize> = None;
            for (i, c) in word.char_indices() {
                if is_cjk_ideograph(c) {
                    if let Some(rs) = run_start.take() {
                        spans.push(TokenSpan { start: offset + rs, end: offset + i });
                    }
                    spans.push(TokenSpan { start: offset + i, end: offset + i + c.len_utf8() });
                } else if run_start.is_none() {
                    run_start = Some(i);
                }
            }
            if let Some(rs) = run_start {
                spans.push(TokenSpan { start: offset + rs, end: offset + word.len() });
            }
        }
        spans
    }
}

/// Token count of `text` under the default tokenizer.
pub fn count_tokens(text: &str) -> usize {
    WordTokenizer.count_tokens(text)
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid chunking config: overlap {overlap} must be smaller than size {size}")]
    InvalidChunking { size: usize, overlap: usize },
    #[error("document {id:?} has empty text")]
    EmptyText { id: String },
    #[error("duplicate document id {id:?}")]
    DuplicateId { id: String },
    #[error("document with empty id (title {title:?})")]
    EmptyId { title: String },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// Splits `doc` into sliding windows of `size` tokens advancing by
/// `size - overlap`; the final chunk may be shorter. A trailing window
/// that would start past the last token is not emitted, but a short tail
/// is: a 1200-token document at size 1200 / overlap 100 yields two
/// chunks, the second covering tokens 1100..1200.
pub fn chunk_document(doc: &Document, size: usize, overlap: usize) -> Result<Vec<Chunk>, CorpusError> {
    chunk_document_with(&WordTokenizer, doc, size, overlap)
}

/// [`chunk_document`] with an explicit tokenizer.
pub fn chunk_document_with(
    tokenizer: &dyn Tokenizer,
    doc: &Document,
    size: usize,
    overlap: usize,
) -> Result<Vec<Chunk>, CorpusError> {
    if size == 0 || overlap >= size {
        return Err(CorpusError::InvalidChunking { size, overlap });
    }
    let spans = tokenizer.token_spans(&doc.text);
    let total = spans.len();
    let stride = size - overlap;
    let mut chunks = Vec::new();
    let mut start = 0usize;
    while start < total {
        let end = usize::min(start + size, total);
        let byte_start = spans[start].start;
        let byte_end = spans[end - 1].end;
        chunks.push(Chunk {
            doc_id: doc.id.clone(),
            index: chunks.len(),
            start,
            end,
            text: doc.text[byte_start..byte_end].to_string(),
            token_count: end - start,
        });
        start += stride;
    }
    Ok(chunks)
}

/// Reads a corpus JSONL file, validating that every document has a
/// nonempty unique id and nonempty text.
pub fn read_corpus(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let docs: Vec<Document> = read_jsonl(path)?;
    let mut seen = std::collections::HashSet::new();
    for doc in &docs {
        if doc.id.is_empty() {
            return Err(CorpusError::EmptyId { title: doc.title.clone() });
        }
        if doc.text.trim().is_empty() {
            return Err(CorpusError::EmptyText { id: doc.id.clone() });
        }
        if !seen.insert(doc.id.clone()) {
            return Err(CorpusError::DuplicateId { id: doc.id.clone() });
        }
    }
    Ok(docs)
}

/// Writes chunks as JSONL.
pub fn write_chunks(path: &Path, chunks: &[Chunk]) -> Result<(), CorpusError> {
    Ok(write_jsonl(path, chunks)?)
}

/// Reads chunks back from JSONL.
pub fn read_chunks(path: &Path) -> Result<Vec<Chunk>, CorpusError> {
    Ok(read_jsonl(path)?)
}
