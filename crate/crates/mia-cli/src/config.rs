//! Pipeline configuration: one TOML file shared by every subcommand.
//!
//! Paths are resolved relative to the config file's directory so a
//! checked-out fixture tree works from any working directory. Range
//! and existence violations are collected and reported together.

use std::path::{Path, PathBuf};

use mia_core::ragflow::Task;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub qa: PathBuf,
    pub index_dir: PathBuf,
    pub mindscape_dir: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewayConfig {
    /// "mock" or "http".
    pub backend: String,
    pub seed: u64,
    pub model_tag: String,
    pub parallelism: usize,
    pub base_url: String,
    /// Environment variable holding the API key for the http backend.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            backend: "mock".into(),
            seed: 7,
            model_tag: "mock-chat".into(),
            parallelism: 1,
            base_url: String::new(),
            api_key_env: "MIA_API_KEY".into(),
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    /// "mock" or "http".
    pub backend: String,
    pub seed: u64,
    /// Mock embedding dimension (the http backend reports its own).
    pub dim: usize,
    pub model_tag: String,
    pub base_url: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            backend: "mock".into(),
            seed: 3,
            dim: 64,
            model_tag: "mock-embed".into(),
            base_url: String::new(),
            api_key_env: "MIA_EMBED_API_KEY".into(),
            timeout_secs: 60,
        }
    }
}

/// Explicit chunking override; when the section is absent the task
/// defaults apply (window 1200 / overlap 100, or window 200 for
/// claim-verification corpora).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkingConfig {
    pub size: usize,
    pub overlap: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MindscapeConfig {
    /// Token budget for one reduction group of chunk summaries.
    pub budget: usize,
}

impl Default for MindscapeConfig {
    fn default() -> Self {
        MindscapeConfig { budget: 8000 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    /// Residual mixing weight for the plain query representation.
    pub delta: f64,
    /// Retrieval cutoffs reported by `eval`; `answer` uses the largest.
    pub k: Vec<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { delta: 0.5, k: vec![3, 5, 10] }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotateSection {
    pub seed: u64,
    pub k_retrieve: usize,
    pub k_select: usize,
    /// Whether `index` also extracts entities and builds a node index.
    pub nodes: bool,
}

impl Default for AnnotateSection {
    fn default() -> Self {
        AnnotateSection { seed: 0, k_retrieve: 10, k_select: 10, nodes: false }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_ratio: f64,
    pub tau: f64,
    pub beta: f64,
    pub delta_learnable: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 1e-4,
            steps: 2000,
            batch_size: 32,
            seed: 0,
            warmup_ratio: 0.1,
            tau: 0.01,
            beta: 0.5,
            delta_learnable: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    /// Inclusive range of noise chunks mixed into each example.
    pub noise_range: [usize; 2],
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { noise_range: [1, 3], seed: 0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Generation task family: narrativeqa | detective | infbench | nocha.
    #[serde(default = "default_task")]
    pub task: String,
    pub paths: PathsConfig,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub chunking: Option<ChunkingConfig>,
    #[serde(default)]
    pub mindscape: MindscapeConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub annotate: AnnotateSection,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub sft: SftConfig,
}

fn default_task() -> String {
    "narrativeqa".into()
}

impl PipelineConfig {
    pub fn task(&self) -> Task {
        Task::from_name(&self.task).expect("validated task name")
    }

    /// Chunk window and overlap: explicit section if present, otherwise
    /// 1200/100, shrunk to 200/100 for claim-verification corpora.
    pub fn effective_chunking(&self) -> (usize, usize) {
        match &self.chunking {
            Some(c) => (c.size, c.overlap),
            None if self.task == "nocha" => (200, 100),
            None => (1200, 100),
        }
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        join(&mut self.paths.corpus);
        join(&mut self.paths.qa);
        join(&mut self.paths.index_dir);
        join(&mut self.paths.mindscape_dir);
        join(&mut self.paths.output_dir);
    }

    /// Collects every violation instead of stopping at the first.
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if Task::from_name(&self.task).is_none() {
            v.push(format!(
                "task {:?} is not one of narrativeqa, detective, infbench, nocha",
                self.task
            ));
        }
        if !self.paths.corpus.is_file() {
            v.push(format!("corpus file {} does not exist", self.paths.corpus.display()));
        }
        if !self.paths.qa.is_file() {
            v.push(format!("qa file {} does not exist", self.paths.qa.display()));
        }
        match self.gateway.backend.as_str() {
            "mock" => {}
            "http" => {
                if self.gateway.base_url.is_empty() {
                    v.push("gateway.backend = \"http\" requires gateway.base_url".into());
                }
            }
            other => v.push(format!("gateway.backend {other:?} is not \"mock\" or \"http\"")),
        }
        if self.gateway.parallelism == 0 {
            v.push("gateway.parallelism must be at least 1".into());
        }
        match self.embedding.backend.as_str() {
            "mock" => {
                if self.embedding.dim == 0 {
                    v.push("embedding.dim must be positive".into());
                }
            }
            "http" => {
                if self.embedding.base_url.is_empty() {
                    v.push("embedding.backend = \"http\" requires embedding.base_url".into());
                }
            }
            other => v.push(format!("embedding.backend {other:?} is not \"mock\" or \"http\"")),
        }
        let (size, overlap) = self.effective_chunking();
        if size == 0 {
            v.push("chunking.size must be positive".into());
        }
        if overlap >= size && size > 0 {
            v.push(format!("chunking.overlap {overlap} must be smaller than chunking.size {size}"));
        }
        if self.mindscape.budget == 0 {
            v.push("mindscape.budget must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.retrieval.delta) {
            v.push(format!("retrieval.delta {} must lie in [0, 1]", self.retrieval.delta));
        }
        if self.retrieval.k.is_empty() {
            v.push("retrieval.k must list at least one cutoff".into());
        }
        if self.retrieval.k.iter().any(|&k| k == 0) {
            v.push("retrieval.k entries must be positive".into());
        }
        if self.annotate.k_retrieve == 0 {
            v.push("annotate.k_retrieve must be positive".into());
        }
        if self.annotate.k_select == 0 {
            v.push("annotate.k_select must be positive".into());
        }
        if !(self.training.lr.is_finite() && self.training.lr > 0.0) {
            v.push(format!("training.lr {} must be positive", self.training.lr));
        }
        if self.training.steps == 0 {
            v.push("training.steps must be positive".into());
        }
        if self.training.batch_size == 0 {
            v.push("training.batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.training.warmup_ratio) {
            v.push(format!(
                "training.warmup_ratio {} must lie in [0, 1]",
                self.training.warmup_ratio
            ));
        }
        if !(self.training.tau.is_finite() && self.training.tau > 0.0) {
            v.push(format!("training.tau {} must be positive", self.training.tau));
        }
        if !(0.0..=1.0).contains(&self.training.beta) {
            v.push(format!("training.beta {} must lie in [0, 1]", self.training.beta));
        }
        if self.sft.noise_range[0] > self.sft.noise_range[1] {
            v.push(format!(
                "sft.noise_range [{}, {}] is inverted",
                self.sft.noise_range[0], self.sft.noise_range[1]
            ));
        }
        v
    }

    // ---- artifact locations -------------------------------------------

    pub fn chunks_path(&self) -> PathBuf {
        self.paths.output_dir.join("chunks.jsonl")
    }

    pub fn mindscape_path(&self, doc_id: &str) -> PathBuf {
        self.paths.mindscape_dir.join(format!("{doc_id}.mindscape.json"))
    }

    pub fn chunk_index_path(&self, doc_id: &str) -> PathBuf {
        self.paths.index_dir.join(format!("{doc_id}.chunks.idx"))
    }

    pub fn node_index_path(&self, doc_id: &str) -> PathBuf {
        self.paths.index_dir.join(format!("{doc_id}.nodes.idx"))
    }

    pub fn nodes_path(&self, doc_id: &str) -> PathBuf {
        self.paths.index_dir.join(format!("{doc_id}.nodes.jsonl"))
    }

    pub fn silver_path(&self, kind: &str) -> PathBuf {
        self.paths.output_dir.join(format!("silver.{kind}.jsonl"))
    }

    pub fn gold_path(&self, kind: &str) -> PathBuf {
        self.paths.output_dir.join(format!("gold.{kind}.jsonl"))
    }

    pub fn sft_path(&self, kind: &str) -> PathBuf {
        self.paths.output_dir.join(format!("sft.{kind}.jsonl"))
    }

    pub fn adapter_path(&self) -> PathBuf {
        self.paths.output_dir.join("adapter.bin")
    }

    pub fn trace_path(&self) -> PathBuf {
        self.paths.output_dir.join("trace.csv")
    }

    pub fn retrieval_path(&self) -> PathBuf {
        self.paths.output_dir.join("retrieval.jsonl")
    }

    pub fn predictions_path(&self) -> PathBuf {
        self.paths.output_dir.join("predictions.jsonl")
    }

    pub fn report_path(&self) -> PathBuf {
        self.paths.output_dir.join("report.json")
    }

    pub fn analysis_path(&self) -> PathBuf {
        self.paths.output_dir.join("analysis.json")
    }

    pub fn manifest_dir(&self) -> PathBuf {
        self.paths.output_dir.join("manifests")
    }
}

/// Parses, resolves, and validates the config; returns it together
/// with the digest of the raw config bytes (the value every stage
/// manifest records).
pub fn load_config(path: &Path) -> Result<(PipelineConfig, String), CliError> {
    let bytes = std::fs::read(path).map_err(|e| {
        CliError::Config(vec![format!("cannot read config {}: {e}", path.display())])
    })?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::Config(vec![format!("config {} is not UTF-8", path.display())]))?;
    let mut config: PipelineConfig = toml::from_str(&text)
        .map_err(|e| CliError::Config(vec![format!("config {}: {e}", path.display())]))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    config.resolve(base);
    let violations = config.violations();
    if !violations.is_empty() {
        return Err(CliError::Config(violations));
    }
    let digest = format!("sha256:{}", mia_core::util::sha256_hex(&bytes));
    Ok((config, digest))
}
