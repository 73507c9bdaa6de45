//! Query composition and summary-conditioned embeddings.
//!
//! A retrieval query is composed with the document's global summary and
//! control tokens into one instructed input, embedded, and then blended
//! with the plain query embedding through a residual combination
//! `q_tilde = normalize(delta * h_q + (1 - delta) * h_t)`. At
//! `delta = 1` the conditioned query degrades exactly to the plain query
//! embedding, which keeps retrieval behaviour identical to an
//! unconditioned baseline — that endpoint is special-cased so the
//! equality holds bit for bit, not just within rounding.
//!
//! Embeddings come from a black-box service (or the deterministic mock),
//! so the plain-query and composed-input representations are produced by
//! two separate embedding calls rather than by reading internal hidden
//! states; the residual formula is applied verbatim in embedding space.
//! Every [`ConditionedQuery`] records this approximation in its
//! `provenance` field.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::mindscape::Mindscape;

/// Which evidence population a query targets: text chunks or entity
/// nodes. Decides the terminal control token of the composed input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceKind {
    Chunk,
    Node,
}

impl EvidenceKind {
    pub fn name(self) -> &'static str {
        match self {
            EvidenceKind::Chunk => "chunk",
            EvidenceKind::Node => "node",
        }
    }
}

/// A dense embedding; `normalized` marks vectors with unit L2 norm
/// (within 1e-6).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub normalized: bool,
}

/// Tolerance for the unit-norm invariant on normalized vectors.
pub const NORM_TOLERANCE: f64 = 1e-6;

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// L2 norm, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= NORM_TOLERANCE
    }

    /// Returns a unit-norm copy; errors on (near-)zero vectors.
    pub fn normalize(&self) -> Result<EmbeddingVector, EmbedError> {
        let norm = self.norm();
        if norm < 1e-12 {
            return Err(EmbedError::ZeroVector);
        }
        let values = self.values.iter().map(|&v| (f64::from(v) / norm) as f32).collect();
        Ok(EmbeddingVector { values, normalized: true })
    }

    /// Dot product with f32 accumulation — the scoring arithmetic used
    /// by the vector index (cosine for unit vectors). Oracles comparing
    /// against index results must use the same accumulation.
    pub fn dot(&self, other: &EmbeddingVector) -> f32 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    /// Checks finiteness and the unit-norm invariant (when claimed).
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        if self.normalized && !self.is_unit() {
            return Err(EmbedError::NotNormalized { norm: self.norm() });
        }
        Ok(())
    }
}

/// The instruction prefix and the three control tokens that delimit the
/// composed retrieval input. All four strings must be pairwise distinct
/// and nonempty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlTokens {
    pub inst: String,
    pub d_q: String,
    pub d_n: String,
    pub d_c: String,
}

impl Default for ControlTokens {
    fn default() -> Self {
        ControlTokens {
            inst: "Instruct:\nGiven a search query with the book's summary, retrieve relevant \
                   chunks or helpful entity summaries from the given context that answer the \
                   query.\nQuery:\n"
                .to_string(),
            d_q: "<|endoftext|>".to_string(),
            d_n: "<|node_mode|>".to_string(),
            d_c: "<|chunk_mode|>".to_string(),
        }
    }
}

impl ControlTokens {
    pub fn validate(&self) -> Result<(), EmbedError> {
        let all = [&self.inst, &self.d_q, &self.d_n, &self.d_c];
        if all.iter().any(|s| s.is_empty()) {
            return Err(EmbedError::InvalidControlTokens("control token is empty".into()));
        }
        for i in 0..all.len() {
            for j in (i + 1)..all.len() {
                if all[i] == all[j] {
                    return Err(EmbedError::InvalidControlTokens(format!(
                        "control tokens must be pairwise distinct, found duplicate {:?}",
                        all[i]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A query conditioned on a document's global summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionedQuery {
    pub query: String,
    pub summary_ref: String,
    pub mode: EvidenceKind,
    pub composed_input: String,
    pub h_q: EmbeddingVector,
    pub h_t: EmbeddingVector,
    pub q_tilde: EmbeddingVector,
    pub delta: f64,
    /// How the two representations were obtained (black-box embedding
    /// calls rather than internal hidden states).
    pub provenance: String,
}

/// Recorded in every [`ConditionedQuery`].
pub const CONDITIONING_PROVENANCE: &str =
    "h_q=embed(inst+query); h_t=embed(composed_input); residual applied in embedding space";

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("embedding dimension changed mid-session: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector dimensions differ: {left} vs {right}")]
    VectorDimMismatch { left: usize, right: usize },
    #[error("residual combination produced the zero vector")]
    ZeroVector,
    #[error("vector contains non-finite entries")]
    NonFinite,
    #[error("vector claimed normalized but has norm {norm}")]
    NotNormalized { norm: f64 },
    #[error("delta {0} outside [0, 1]")]
    InvalidDelta(f64),
    #[error("invalid control tokens: {0}")]
    InvalidControlTokens(String),
    #[error("no texts to embed")]
    EmptyInput,
    #[error("embedding api error status {status}: {detail}")]
    ApiStatus { status: u16, detail: String },
    #[error("embedding response missing vectors")]
    EmptyResponse,
}

/// Embedding backend. Implementations must preserve input order and
/// return L2-normalized vectors of a fixed dimension.
pub trait Embedder: Send + Sync {
    /// Dimension, if known before the first call.
    fn dim_hint(&self) -> Option<usize>;

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    /// Embeds a single text; convenience over the batch call.
    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let batch = [text.to_string()];
        let out = self.embed(&batch)?;
        out.into_iter().next().ok_or(EmbedError::EmptyResponse)
    }
}

/// Deterministic embedder: each text maps to a seeded pseudo-random
/// unit vector derived from the SHA-256 of (seed, text).
pub struct MockEmbedder {
    seed: u64,
    dim: usize,
}

impl MockEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        MockEmbedder { seed, dim }
    }

    fn vector_for(&self, text: &str) -> EmbeddingVector {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update([0x1f]);
        h.update(text.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(digest);
        let mut values: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            // Astronomically unlikely; pin to a basis vector.
            values = vec![0.0; self.dim];
            values[0] = 1.0;
            return EmbeddingVector {
                values: values.into_iter().map(|v| v as f32).collect(),
                normalized: true,
            };
        }
        EmbeddingVector {
            values: values.into_iter().map(|v| (v / norm) as f32).collect(),
            normalized: true,
        }
    }
}

impl Embedder for MockEmbedder {
    fn dim_hint(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        Ok(texts.iter().map(|t| self.vector_for(t)).collect())
    }
}

/// Blocking client for an OpenAI-compatible `/embeddings` endpoint.
/// The dimension is learned from the first response and later batches
/// must match it.
pub struct HttpEmbedder {
    base_url: String,
    api_key: Option<String>,
    model_tag: String,
    client: reqwest::blocking::Client,
    dim: std::sync::OnceLock<usize>,
}

#[derive(Serialize)]
struct WireEmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct WireEmbedding {
    embedding: Vec<f32>,
    index: usize,
}

#[derive(Deserialize)]
struct WireEmbedResponse {
    data: Vec<WireEmbedding>,
}

impl HttpEmbedder {
    pub fn new(
        base_url: impl Into<String>,
        api_key: Option<String>,
        model_tag: impl Into<String>,
        timeout: std::time::Duration,
    ) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("reqwest client");
        HttpEmbedder {
            base_url: base_url.into(),
            api_key,
            model_tag: model_tag.into(),
            client,
            dim: std::sync::OnceLock::new(),
        }
    }

    /// Reads endpoint and key from `MIA_EMBED_API_BASE` /
    /// `MIA_EMBED_API_KEY`, falling back to `MIA_API_BASE` / `MIA_API_KEY`.
    pub fn from_env(model_tag: impl Into<String>) -> Result<Self, EmbedError> {
        let base = std::env::var("MIA_EMBED_API_BASE")
            .or_else(|_| std::env::var("MIA_API_BASE"))
            .map_err(|_| EmbedError::Transport("MIA_EMBED_API_BASE not set".into()))?;
        let key = std::env::var("MIA_EMBED_API_KEY")
            .or_else(|_| std::env::var("MIA_API_KEY"))
            .ok();
        Ok(HttpEmbedder::new(base, key, model_tag, std::time::Duration::from_secs(60)))
    }
}

impl Embedder for HttpEmbedder {
    fn dim_hint(&self) -> Option<usize> {
        self.dim.get().copied()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        let url = format!("{}/embeddings", self.base_url.trim_end_matches('/'));
        let body = WireEmbedRequest { model: &self.model_tag, input: texts };
        let mut builder = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| EmbedError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let detail = resp.text().unwrap_or_default().chars().take(200).collect();
            return Err(EmbedError::ApiStatus { status, detail });
        }
        let mut wire: WireEmbedResponse =
            resp.json().map_err(|e| EmbedError::Transport(e.to_string()))?;
        if wire.data.len() != texts.len() {
            return Err(EmbedError::EmptyResponse);
        }
        wire.data.sort_by_key(|d| d.index);
        let mut out = Vec::with_capacity(wire.data.len());
        for item in wire.data {
            let expected = *self.dim.get_or_init(|| item.embedding.len());
            if item.embedding.len() != expected {
                return Err(EmbedError::DimensionMismatch {
                    expected,
                    got: item.embedding.len(),
                });
            }
            let raw = EmbeddingVector { values: item.embedding, normalized: false };
            out.push(raw.normalize()?);
        }
        Ok(out)
    }
}

/// Builds the composed retrieval input: instruction, query, the query
/// delimiter, the global summary, then the terminal mode token
/// (`d_c` for chunk retrieval, `d_n` for node retrieval).
pub fn compose_query_input(query: &str, s: &str, mode: EvidenceKind, ct: &ControlTokens) -> String {
    let terminal = match mode {
        EvidenceKind::Chunk => &ct.d_c,
        EvidenceKind::Node => &ct.d_n,
    };
    format!("{}{}{}{}{}", ct.inst, query, ct.d_q, s, terminal)
}

/// `normalize(delta * h_q + (1 - delta) * h_t)`.
///
/// The endpoints are returned without renormalization: for unit inputs
/// the result is mathematically the input itself, and returning it
/// unchanged keeps downstream retrieval at `delta = 1` bit-identical to
/// plain-query retrieval.
pub fn residual_combine(
    h_q: &EmbeddingVector,
    h_t: &EmbeddingVector,
    delta: f64,
) -> Result<EmbeddingVector, EmbedError> {
    if h_q.dim() != h_t.dim() {
        return Err(EmbedError::VectorDimMismatch { left: h_q.dim(), right: h_t.dim() });
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(EmbedError::InvalidDelta(delta));
    }
    if delta == 1.0 {
        return if h_q.is_unit() { Ok(h_q.clone()) } else { h_q.normalize() };
    }
    if delta == 0.0 {
        return if h_t.is_unit() { Ok(h_t.clone()) } else { h_t.normalize() };
    }
    let combined: Vec<f64> = h_q
        .values
        .iter()
        .zip(&h_t.values)
        .map(|(&q, &t)| delta * f64::from(q) + (1.0 - delta) * f64::from(t))
        .collect();
    let norm = combined.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(EmbedError::ZeroVector);
    }
    Ok(EmbeddingVector {
        values: combined.into_iter().map(|v| (v / norm) as f32).collect(),
        normalized: true,
    })
}

/// Embeds the plain query and the summary-composed input, then blends
/// them with the residual weight. `delta` defaults to 0.5 throughout
/// the pipeline configs.
pub fn condition_query(
    embedder: &dyn Embedder,
    query: &str,
    mindscape: &Mindscape,
    mode: EvidenceKind,
    delta: f64,
    ct: &ControlTokens,
) -> Result<ConditionedQuery, EmbedError> {
    ct.validate()?;
    let plain = format!("{}{}", ct.inst, query);
    let composed = compose_query_input(query, &mindscape.global_summary, mode, ct);
    let vectors = embedder.embed(&[plain, composed.clone()])?;
    let [h_q, h_t]: [EmbeddingVector; 2] = vectors
        .try_into()
        .map_err(|_| EmbedError::EmptyResponse)?;
    let q_tilde = residual_combine(&h_q, &h_t, delta)?;
    Ok(ConditionedQuery {
        query: query.to_string(),
        summary_ref: mindscape.doc_id.clone(),
        mode,
        composed_input: composed,
        h_q,
        h_t,
        q_tilde,
        delta,
        provenance: CONDITIONING_PROVENANCE.to_string(),
    })
}
