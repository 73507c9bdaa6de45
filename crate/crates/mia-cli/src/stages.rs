//! The nine pipeline stages behind the subcommands.
//!
//! Each stage reads artifacts produced by earlier stages, writes its
//! own under the configured directories, and records a manifest of
//! input/output digests so every byte is traceable to the raw corpus.

use std::collections::BTreeMap;
use std::path::Path;

use mia_core::adapter::{
    load_adapter, save_adapter, train, write_trace_csv, AdapterParams, ContrastiveTuple,
    ResidualParts, TrainConfig,
};
use mia_core::analysis::{load_attention_dump, mcea_layer, projection_angle};
use mia_core::corpus::{chunk_document, read_chunks, read_corpus, write_chunks, Chunk};
use mia_core::embedding::{
    condition_query, ControlTokens, Embedder, EvidenceKind, HttpEmbedder, MockEmbedder,
};
use mia_core::eval::{render_report, run_eval, write_report, EvalConfig, GoldRow};
use mia_core::gateway::{Gateway, HttpGateway, RetryPolicy};
use mia_core::index::Collection;
use mia_core::mindscape::{
    load_mindscape, save_mindscape, save_nodes, Mindscape, MindscapeBuilder,
};
use mia_core::ragflow::{build_sft_examples, AnswerMode, MixConfig, RagPipeline};
use mia_core::silver::{annotate_corpus, AnnotateConfig, AnnotateStats, QaPair, SilverRecord};
use mia_core::util::{read_jsonl, write_jsonl};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::manifest::Manifest;

// ---- shared plumbing --------------------------------------------------

pub fn build_gateway(cfg: &PipelineConfig) -> Result<Gateway, CliError> {
    let gw = match cfg.gateway.backend.as_str() {
        "mock" => Gateway::mock(cfg.gateway.seed),
        "http" => {
            let api_key = std::env::var(&cfg.gateway.api_key_env).ok();
            let backend = HttpGateway::new(
                cfg.gateway.base_url.clone(),
                api_key,
                std::time::Duration::from_secs(cfg.gateway.timeout_secs),
            );
            Gateway::new(Box::new(backend), RetryPolicy::default())
        }
        other => return Err(CliError::Config(vec![format!("unknown gateway backend {other:?}")])),
    };
    Ok(gw.with_parallelism(cfg.gateway.parallelism))
}

pub fn build_embedder(cfg: &PipelineConfig) -> Result<Box<dyn Embedder>, CliError> {
    match cfg.embedding.backend.as_str() {
        "mock" => Ok(Box::new(MockEmbedder::new(cfg.embedding.seed, cfg.embedding.dim))),
        "http" => {
            let api_key = std::env::var(&cfg.embedding.api_key_env).ok();
            Ok(Box::new(HttpEmbedder::new(
                cfg.embedding.base_url.clone(),
                api_key,
                cfg.embedding.model_tag.clone(),
                std::time::Duration::from_secs(cfg.embedding.timeout_secs),
            )))
        }
        other => Err(CliError::Config(vec![format!("unknown embedding backend {other:?}")])),
    }
}

fn load_chunks_artifact(cfg: &PipelineConfig) -> Result<Vec<Chunk>, CliError> {
    let path = cfg.chunks_path();
    if !path.is_file() {
        return Err(CliError::missing("corpus artifact", &path, "ingest"));
    }
    Ok(read_chunks(&path)?)
}

/// Groups chunks by document, preserving first-appearance order.
fn group_by_doc(chunks: Vec<Chunk>) -> Vec<(String, Vec<Chunk>)> {
    let mut order: Vec<String> = Vec::new();
    let mut by_doc: BTreeMap<String, Vec<Chunk>> = BTreeMap::new();
    for chunk in chunks {
        if !by_doc.contains_key(&chunk.doc_id) {
            order.push(chunk.doc_id.clone());
        }
        by_doc.entry(chunk.doc_id.clone()).or_default().push(chunk);
    }
    order
        .into_iter()
        .map(|doc| {
            let chunks = by_doc.remove(&doc).expect("grouped");
            (doc, chunks)
        })
        .collect()
}

/// One question as stored in the qa JSONL file. `doc_id` may be
/// omitted when the corpus holds a single document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QaRow {
    pub qid: String,
    pub query: String,
    #[serde(default)]
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
}

fn load_qa(cfg: &PipelineConfig) -> Result<Vec<QaRow>, CliError> {
    Ok(read_jsonl(&cfg.paths.qa)?)
}

/// Resolves each row to a document and groups rows per document in the
/// given document order, keeping original row indices for stitching.
fn route_by_doc(
    rows: &[QaRow],
    docs: &[String],
) -> Result<Vec<(String, Vec<(usize, QaRow)>)>, CliError> {
    let mut grouped: BTreeMap<&str, Vec<(usize, QaRow)>> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        let doc = match &row.doc_id {
            Some(d) => {
                if !docs.iter().any(|known| known == d) {
                    return Err(CliError::Invariant(format!(
                        "qa row {:?} names unknown document {d:?}",
                        row.qid
                    )));
                }
                d.as_str()
            }
            None if docs.len() == 1 => docs[0].as_str(),
            None => {
                return Err(CliError::Invariant(format!(
                    "qa row {:?} has no doc_id but the corpus has {} documents",
                    row.qid,
                    docs.len()
                )))
            }
        };
        grouped.entry(doc).or_default().push((i, row.clone()));
    }
    Ok(docs
        .iter()
        .filter_map(|doc| grouped.remove(doc.as_str()).map(|rows| (doc.clone(), rows)))
        .collect())
}

fn require(path: &Path, what: &str, producer: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::missing(what, path, producer))
    }
}

fn load_doc_collection(cfg: &PipelineConfig, doc: &str, kind: EvidenceKind) -> Result<Collection, CliError> {
    let (path, what) = match kind {
        EvidenceKind::Chunk => (cfg.chunk_index_path(doc), "index artifact"),
        EvidenceKind::Node => (cfg.node_index_path(doc), "node index artifact"),
    };
    require(&path, what, "index")?;
    Ok(Collection::load(&path, doc)?)
}

fn load_doc_mindscape(cfg: &PipelineConfig, doc: &str) -> Result<Mindscape, CliError> {
    let path = cfg.mindscape_path(doc);
    require(&path, "mindscape artifact", "mindscape")?;
    Ok(load_mindscape(&path)?)
}

/// Loads the trained adapter when its artifact exists; stages that can
/// run without one fall back to the identity mapping.
fn maybe_adapter(cfg: &PipelineConfig) -> Result<Option<AdapterParams>, CliError> {
    let path = cfg.adapter_path();
    if path.is_file() {
        Ok(Some(load_adapter(&path)?))
    } else {
        Ok(None)
    }
}

// ---- ingest -----------------------------------------------------------

pub fn ingest(cfg: &PipelineConfig, config_digest: &str) -> Result<(), CliError> {
    let docs = read_corpus(&cfg.paths.corpus)?;
    let (size, overlap) = cfg.effective_chunking();
    let mut chunks = Vec::new();
    for doc in &docs {
        let doc_chunks = chunk_document(doc, size, overlap)?;
        log::info!("{}: {} chunks (size {size}, overlap {overlap})", doc.id, doc_chunks.len());
        chunks.extend(doc_chunks);
    }
    std::fs::create_dir_all(&cfg.paths.output_dir)?;
    write_chunks(&cfg.chunks_path(), &chunks)?;
    let mut manifest = Manifest::new("ingest", config_digest);
    manifest.input("corpus", &cfg.paths.corpus)?;
    manifest.output("chunks", &cfg.chunks_path())?;
    manifest.write(&cfg.manifest_dir())?;
    println!("ingested {} document(s) into {} chunks", docs.len(), chunks.len());
    Ok(())
}

// ---- mindscape --------------------------------------------------------

pub fn mindscape(cfg: &PipelineConfig, config_digest: &str) -> Result<(), CliError> {
    let chunks = load_chunks_artifact(cfg)?;
    let gateway = build_gateway(cfg)?;
    let builder = MindscapeBuilder::new(&gateway, cfg.gateway.model_tag.clone());
    std::fs::create_dir_all(&cfg.paths.mindscape_dir)?;
    let mut manifest = Manifest::new("mindscape", config_digest);
    manifest.input("chunks", &cfg.chunks_path())?;
    for (doc, doc_chunks) in group_by_doc(chunks) {
        let ms = builder.build(&doc, &doc_chunks, cfg.mindscape.budget)?;
        let path = cfg.mindscape_path(&doc);
        save_mindscape(&path, &ms)?;
        manifest.output(format!("mindscape:{doc}"), &path)?;
        println!(
            "{doc}: {} chunk summaries reduced over {} level(s)",
            ms.chunk_summaries.len(),
            ms.levels
        );
    }
    manifest.write(&cfg.manifest_dir())?;
    Ok(())
}

// ---- index ------------------------------------------------------------

pub fn index(cfg: &PipelineConfig, config_digest: &str) -> Result<(), CliError> {
    let chunks = load_chunks_artifact(cfg)?;
    let embedder = build_embedder(cfg)?;
    std::fs::create_dir_all(&cfg.paths.index_dir)?;
    let mut manifest = Manifest::new("index", config_digest);
    manifest.input("chunks", &cfg.chunks_path())?;
    let grouped = group_by_doc(chunks);
    for (doc, doc_chunks) in &grouped {
        let texts: Vec<String> = doc_chunks.iter().map(|c| c.text.clone()).collect();
        let vectors = embedder.embed(&texts)?;
        let dim = vectors[0].dim();
        let mut collection = Collection::new(doc.clone(), dim);
        for (chunk, vector) in doc_chunks.iter().zip(vectors) {
            collection.insert(chunk.id_str(), vector, chunk.text.clone().into_bytes())?;
        }
        let path = cfg.chunk_index_path(doc);
        collection.save(&path)?;
        manifest.output(format!("index:{doc}"), &path)?;
        println!("{doc}: indexed {} chunk vectors (dim {dim})", collection.len());
    }
    if cfg.annotate.nodes {
        let gateway = build_gateway(cfg)?;
        let builder = MindscapeBuilder::new(&gateway, cfg.gateway.model_tag.clone());
        for (doc, doc_chunks) in &grouped {
            let nodes = builder.extract_entities(doc_chunks)?;
            let nodes_path = cfg.nodes_path(doc);
            save_nodes(&nodes_path, &nodes)?;
            let texts: Vec<String> = nodes.iter().map(|n| n.evidence_text()).collect();
            let mut collection = Collection::new(format!("{doc}:nodes"), cfg.embedding.dim);
            if !texts.is_empty() {
                let vectors = embedder.embed(&texts)?;
                let mut with_dim = Collection::new(format!("{doc}:nodes"), vectors[0].dim());
                for (i, (node, vector)) in nodes.iter().zip(vectors).enumerate() {
                    with_dim.insert(
                        format!("n{i:04}"),
                        vector,
                        node.evidence_text().into_bytes(),
                    )?;
                }
                collection = with_dim;
            }
            let path = cfg.node_index_path(doc);
            collection.save(&path)?;
            manifest.output(format!("nodes:{doc}"), &nodes_path)?;
            manifest.output(format!("nodes-index:{doc}"), &path)?;
            println!("{doc}: indexed {} entity nodes", collection.len());
        }
    }
    manifest.write(&cfg.manifest_dir())?;
    Ok(())
}

// ---- annotate ---------------------------------------------------------

fn merge_stats(total: &mut AnnotateStats, part: &AnnotateStats) {
    let merged_n = total.records + part.records;
    if merged_n > 0 {
        total.avg_silver = (total.avg_silver * total.records as f64
            + part.avg_silver * part.records as f64)
            / merged_n as f64;
    }
    total.records = merged_n;
    total.failed += part.failed;
    total.unfiltered += part.unfiltered;
}

pub fn annotate(
    cfg: &PipelineConfig,
    config_digest: &str,
    kind: EvidenceKind,
    with_sft: bool,
) -> Result<(), CliError> {
    let docs: Vec<String> = group_by_doc(load_chunks_artifact(cfg)?)
        .into_iter()
        .map(|(doc, _)| doc)
        .collect();
    let rows = load_qa(cfg)?;
    let routed = route_by_doc(&rows, &docs)?;
    let gateway = build_gateway(cfg)?;
    let embedder = build_embedder(cfg)?;
    let annotate_config = AnnotateConfig {
        k_retrieve: cfg.annotate.k_retrieve,
        k_select: cfg.annotate.k_select,
        seed: cfg.annotate.seed,
        model_tag: cfg.gateway.model_tag.clone(),
    };
    let mut manifest = Manifest::new("annotate", config_digest);
    manifest.input("qa", &cfg.paths.qa)?;
    let mut records: Vec<Option<SilverRecord>> = rows.iter().map(|_| None).collect();
    let mut stats = AnnotateStats { records: 0, failed: 0, unfiltered: 0, avg_silver: 0.0 };
    let mut sft_rows = Vec::new();
    let mut sft_skipped = 0usize;
    for (doc, doc_rows) in &routed {
        let collection = load_doc_collection(cfg, doc, kind)?;
        manifest.input(format!("index:{doc}"), &cfg.chunk_index_path(doc))?;
        if kind == EvidenceKind::Node {
            manifest.input(format!("nodes-index:{doc}"), &cfg.node_index_path(doc))?;
        }
        let pairs: Vec<QaPair> = doc_rows
            .iter()
            .map(|(_, row)| QaPair {
                qid: row.qid.clone(),
                query: row.query.clone(),
                answer: row.answer.clone(),
            })
            .collect();
        let (doc_records, doc_stats) =
            annotate_corpus(&gateway, embedder.as_ref(), &collection, &pairs, kind, doc, &annotate_config)?;
        if with_sft {
            let mix = MixConfig {
                task: cfg.task(),
                noise_range: (cfg.sft.noise_range[0], cfg.sft.noise_range[1]),
                seed: cfg.sft.seed,
            };
            let (examples, skipped) = build_sft_examples(&doc_records, &collection, &mix)?;
            sft_rows.extend(examples);
            sft_skipped += skipped;
        }
        for ((orig, _), record) in doc_rows.iter().zip(doc_records) {
            records[*orig] = Some(record);
        }
        merge_stats(&mut stats, &doc_stats);
    }
    let records: Vec<SilverRecord> = records
        .into_iter()
        .map(|r| r.expect("every qa row annotated"))
        .collect();
    std::fs::create_dir_all(&cfg.paths.output_dir)?;
    let silver_path = cfg.silver_path(kind.name());
    write_jsonl(&silver_path, &records)?;
    let gold: Vec<GoldRow> = rows
        .iter()
        .zip(&records)
        .map(|(row, record)| GoldRow {
            qid: row.qid.clone(),
            answers: (!row.answer.is_empty()).then(|| vec![row.answer.clone()]),
            label: match row.answer.to_lowercase().as_str() {
                "true" => Some(true),
                "false" => Some(false),
                _ => None,
            },
            silver_ids: record.silver_ids.clone(),
            pair_id: row.pair_id.clone(),
        })
        .collect();
    let gold_path = cfg.gold_path(kind.name());
    write_jsonl(&gold_path, &gold)?;
    manifest.output(format!("silver:{}", kind.name()), &silver_path)?;
    manifest.output(format!("gold:{}", kind.name()), &gold_path)?;
    if with_sft {
        let sft_path = cfg.sft_path(kind.name());
        write_jsonl(&sft_path, &sft_rows)?;
        manifest.output(format!("sft:{}", kind.name()), &sft_path)?;
        println!("sft: {} example(s), {} record(s) skipped for empty silver", sft_rows.len(), sft_skipped);
    }
    manifest.write(&cfg.manifest_dir())?;
    println!(
        "annotated {} record(s): {} failed, {} unfiltered, avg silver {:.2}",
        stats.records, stats.failed, stats.unfiltered, stats.avg_silver
    );
    Ok(())
}

// ---- train-adapter ----------------------------------------------------

struct DocCache {
    mindscapes: BTreeMap<String, Mindscape>,
    collections: BTreeMap<(String, &'static str), Collection>,
}

impl DocCache {
    fn new() -> DocCache {
        DocCache { mindscapes: BTreeMap::new(), collections: BTreeMap::new() }
    }

    fn mindscape<'a>(
        &'a mut self,
        cfg: &PipelineConfig,
        doc: &str,
    ) -> Result<&'a Mindscape, CliError> {
        if !self.mindscapes.contains_key(doc) {
            let ms = load_doc_mindscape(cfg, doc)?;
            self.mindscapes.insert(doc.to_string(), ms);
        }
        Ok(&self.mindscapes[doc])
    }

    fn collection<'a>(
        &'a mut self,
        cfg: &PipelineConfig,
        doc: &str,
        kind: EvidenceKind,
    ) -> Result<&'a Collection, CliError> {
        let key = (doc.to_string(), kind.name());
        if !self.collections.contains_key(&key) {
            let collection = load_doc_collection(cfg, doc, kind)?;
            self.collections.insert(key.clone(), collection);
        }
        Ok(&self.collections[&key])
    }
}

pub fn train_adapter(
    cfg: &PipelineConfig,
    config_digest: &str,
    steps_override: Option<usize>,
) -> Result<(), CliError> {
    let mut manifest = Manifest::new("train-adapter", config_digest);
    let mut all_records: Vec<SilverRecord> = Vec::new();
    let mut found_any = false;
    for kind in [EvidenceKind::Chunk, EvidenceKind::Node] {
        let path = cfg.silver_path(kind.name());
        if path.is_file() {
            found_any = true;
            manifest.input(format!("silver:{}", kind.name()), &path)?;
            all_records.extend(read_jsonl::<SilverRecord>(&path)?);
        }
    }
    if !found_any {
        return Err(CliError::missing(
            "silver annotations artifact",
            &cfg.silver_path(EvidenceKind::Chunk.name()),
            "annotate",
        ));
    }
    let embedder = build_embedder(cfg)?;
    let control = ControlTokens::default();
    let mut cache = DocCache::new();
    let mut tuples: Vec<ContrastiveTuple> = Vec::new();
    let mut skipped = 0usize;
    for record in &all_records {
        if record.silver_ids.is_empty() || record.flags.iter().any(|f| f == "failed") {
            skipped += 1;
            continue;
        }
        let conditioned = {
            let ms = cache.mindscape(cfg, &record.doc_id)?;
            condition_query(
                embedder.as_ref(),
                &record.query,
                ms,
                record.task,
                cfg.retrieval.delta,
                &control,
            )?
        };
        let collection = cache.collection(cfg, &record.doc_id, record.task)?;
        let vector_of = |id: &String| {
            collection
                .get(id)
                .map(|e| e.vector.clone())
                .ok_or_else(|| CliError::Invariant(format!("silver id {id:?} not in the index")))
        };
        let negatives = record
            .hard_neg_ids
            .iter()
            .chain(&record.simple_neg_ids)
            .map(vector_of)
            .collect::<Result<Vec<_>, _>>()?;
        for silver_id in &record.silver_ids {
            tuples.push(ContrastiveTuple {
                q_tilde: conditioned.q_tilde.clone(),
                positive: vector_of(silver_id)?,
                negatives: negatives.clone(),
                task: record.task,
                residual: cfg.training.delta_learnable.then(|| ResidualParts {
                    h_q: conditioned.h_q.clone(),
                    h_t: conditioned.h_t.clone(),
                }),
            });
        }
    }
    if skipped > 0 {
        log::info!("skipped {skipped} record(s) without usable silver evidence");
    }
    for doc in cache.mindscapes.keys() {
        manifest.input(format!("mindscape:{doc}"), &cfg.mindscape_path(doc))?;
    }
    for (doc, kind) in cache.collections.keys() {
        let (name, path) = match *kind {
            "node" => (format!("nodes-index:{doc}"), cfg.node_index_path(doc)),
            _ => (format!("index:{doc}"), cfg.chunk_index_path(doc)),
        };
        manifest.input(name, &path)?;
    }
    let train_config = TrainConfig {
        lr: cfg.training.lr,
        steps: steps_override.unwrap_or(cfg.training.steps),
        batch_size: cfg.training.batch_size,
        seed: cfg.training.seed,
        warmup_ratio: cfg.training.warmup_ratio,
        delta: cfg.retrieval.delta,
        delta_learnable: cfg.training.delta_learnable,
        tau: cfg.training.tau,
        beta: cfg.training.beta,
    };
    let result = train(&tuples, &train_config)?;
    std::fs::create_dir_all(&cfg.paths.output_dir)?;
    save_adapter(&result.params, &cfg.adapter_path())?;
    write_trace_csv(&cfg.trace_path(), &result.trace)?;
    manifest.output("adapter", &cfg.adapter_path())?;
    manifest.output("trace", &cfg.trace_path())?;
    manifest.write(&cfg.manifest_dir())?;
    let first = result.trace.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let last = result.trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained on {} tuple(s) for {} step(s): loss {first:.6} -> {last:.6}",
        tuples.len(),
        train_config.steps
    );
    Ok(())
}

// ---- retrieve ---------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RetrievalRow {
    qid: String,
    retrieved_ids: Vec<String>,
    scores: Vec<f32>,
}

pub fn retrieve(
    cfg: &PipelineConfig,
    config_digest: &str,
    kind: EvidenceKind,
    k_override: Option<usize>,
) -> Result<(), CliError> {
    let docs: Vec<String> = group_by_doc(load_chunks_artifact(cfg)?)
        .into_iter()
        .map(|(doc, _)| doc)
        .collect();
    let rows = load_qa(cfg)?;
    let routed = route_by_doc(&rows, &docs)?;
    let embedder = build_embedder(cfg)?;
    let adapter = maybe_adapter(cfg)?;
    let control = ControlTokens::default();
    let k = k_override.unwrap_or_else(|| cfg.retrieval.k.iter().copied().max().unwrap_or(10));
    let mut manifest = Manifest::new("retrieve", config_digest);
    manifest.input("qa", &cfg.paths.qa)?;
    if adapter.is_some() {
        manifest.input("adapter", &cfg.adapter_path())?;
    }
    let mut out: Vec<Option<RetrievalRow>> = rows.iter().map(|_| None).collect();
    for (doc, doc_rows) in &routed {
        let collection = load_doc_collection(cfg, doc, kind)?;
        let ms = load_doc_mindscape(cfg, doc)?;
        match kind {
            EvidenceKind::Chunk => manifest.input(format!("index:{doc}"), &cfg.chunk_index_path(doc))?,
            EvidenceKind::Node => manifest.input(format!("nodes-index:{doc}"), &cfg.node_index_path(doc))?,
        }
        manifest.input(format!("mindscape:{doc}"), &cfg.mindscape_path(doc))?;
        for (orig, row) in doc_rows {
            let conditioned = condition_query(
                embedder.as_ref(),
                &row.query,
                &ms,
                kind,
                cfg.retrieval.delta,
                &control,
            )?;
            let query = match &adapter {
                Some(a) => a.apply(&conditioned.q_tilde)?,
                None => conditioned.q_tilde,
            };
            let hits = collection.top_k(&query, k)?;
            out[*orig] = Some(RetrievalRow {
                qid: row.qid.clone(),
                retrieved_ids: hits.iter().map(|h| h.id.clone()).collect(),
                scores: hits.iter().map(|h| h.score).collect(),
            });
        }
    }
    let out: Vec<RetrievalRow> = out.into_iter().map(|r| r.expect("routed")).collect();
    std::fs::create_dir_all(&cfg.paths.output_dir)?;
    write_jsonl(&cfg.retrieval_path(), &out)?;
    manifest.output("retrieval", &cfg.retrieval_path())?;
    manifest.write(&cfg.manifest_dir())?;
    println!("retrieved top-{k} for {} query(ies)", out.len());
    Ok(())
}

// ---- answer -----------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct PredRow {
    qid: String,
    answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    verdict: Option<bool>,
    retrieved_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    flags: Vec<String>,
}

pub fn answer(
    cfg: &PipelineConfig,
    config_digest: &str,
    k_override: Option<usize>,
    summary_only: bool,
) -> Result<(), CliError> {
    let docs: Vec<String> = group_by_doc(load_chunks_artifact(cfg)?)
        .into_iter()
        .map(|(doc, _)| doc)
        .collect();
    let rows = load_qa(cfg)?;
    let routed = route_by_doc(&rows, &docs)?;
    let gateway = build_gateway(cfg)?;
    let embedder = build_embedder(cfg)?;
    let adapter = maybe_adapter(cfg)?;
    let task = cfg.task();
    let k = k_override.unwrap_or_else(|| cfg.retrieval.k.iter().copied().max().unwrap_or(10));
    let mode = if summary_only { AnswerMode::SummaryOnly } else { AnswerMode::Retrieval };
    let mut manifest = Manifest::new("answer", config_digest);
    manifest.input("qa", &cfg.paths.qa)?;
    if adapter.is_some() {
        manifest.input("adapter", &cfg.adapter_path())?;
    }
    let mut out: Vec<Option<PredRow>> = rows.iter().map(|_| None).collect();
    let mut unparsed = 0usize;
    for (doc, doc_rows) in &routed {
        let collection = load_doc_collection(cfg, doc, EvidenceKind::Chunk)?;
        let ms = load_doc_mindscape(cfg, doc)?;
        manifest.input(format!("index:{doc}"), &cfg.chunk_index_path(doc))?;
        manifest.input(format!("mindscape:{doc}"), &cfg.mindscape_path(doc))?;
        let pipeline = RagPipeline {
            gateway: &gateway,
            embedder: embedder.as_ref(),
            adapter: adapter.as_ref(),
            mindscape: &ms,
            chunks: &collection,
            control: ControlTokens::default(),
            delta: cfg.retrieval.delta,
            model_tag: cfg.gateway.model_tag.clone(),
        };
        for (orig, row) in doc_rows {
            let outcome = pipeline.answer_query(&row.query, k, task, mode)?;
            if outcome.flags.iter().any(|f| f == "unparsed") {
                unparsed += 1;
            }
            out[*orig] = Some(PredRow {
                qid: row.qid.clone(),
                answer: Some(outcome.answer),
                verdict: outcome.verdict,
                retrieved_ids: outcome.retrieved_ids,
                flags: outcome.flags,
            });
        }
    }
    let out: Vec<PredRow> = out.into_iter().map(|r| r.expect("routed")).collect();
    std::fs::create_dir_all(&cfg.paths.output_dir)?;
    write_jsonl(&cfg.predictions_path(), &out)?;
    manifest.output("predictions", &cfg.predictions_path())?;
    manifest.write(&cfg.manifest_dir())?;
    println!("answered {} query(ies) ({unparsed} unparsed)", out.len());
    Ok(())
}

// ---- eval -------------------------------------------------------------

pub fn eval(cfg: &PipelineConfig, config_digest: &str, k_flag: Option<String>) -> Result<(), CliError> {
    let predictions = cfg.predictions_path();
    require(&predictions, "predictions artifact", "answer")?;
    let gold = cfg.gold_path(EvidenceKind::Chunk.name());
    require(&gold, "gold artifact", "annotate")?;
    let k_values = match k_flag {
        Some(spec) => spec
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Config(vec![format!("invalid k list entry {s:?}")]))
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => cfg.retrieval.k.clone(),
    };
    let report = run_eval(&EvalConfig {
        dataset: cfg.task.clone(),
        predictions: predictions.clone(),
        gold: gold.clone(),
        k_values,
    })?;
    print!("{}", render_report(&report));
    write_report(&report, &cfg.report_path())?;
    let mut manifest = Manifest::new("eval", config_digest);
    manifest.input("predictions", &predictions)?;
    manifest.input(format!("gold:{}", EvidenceKind::Chunk.name()), &gold)?;
    manifest.output("report", &cfg.report_path())?;
    manifest.write(&cfg.manifest_dir())?;
    Ok(())
}

// ---- analyze ----------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct AnalysisOut {
    /// Per-query angle (degrees) between the query embedding and the
    /// span of its document's chunk embeddings.
    angles: BTreeMap<String, f64>,
    /// Per-layer evidence-alignment score when an attention dump and a
    /// relevant-chunk list were supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mcea: Option<Vec<f64>>,
}

pub fn analyze(
    cfg: &PipelineConfig,
    config_digest: &str,
    dump: Option<&Path>,
    relevant: Option<&str>,
) -> Result<(), CliError> {
    let docs: Vec<String> = group_by_doc(load_chunks_artifact(cfg)?)
        .into_iter()
        .map(|(doc, _)| doc)
        .collect();
    let rows = load_qa(cfg)?;
    let routed = route_by_doc(&rows, &docs)?;
    let embedder = build_embedder(cfg)?;
    let mut manifest = Manifest::new("analyze", config_digest);
    manifest.input("qa", &cfg.paths.qa)?;
    let mut angles = BTreeMap::new();
    for (doc, doc_rows) in &routed {
        let collection = load_doc_collection(cfg, doc, EvidenceKind::Chunk)?;
        manifest.input(format!("index:{doc}"), &cfg.chunk_index_path(doc))?;
        let chunk_vectors: Vec<Vec<f64>> = collection
            .entries()
            .iter()
            .map(|e| e.vector.values.iter().map(|&x| x as f64).collect())
            .collect();
        for (_, row) in doc_rows {
            let q = embedder.embed_one(&row.query)?;
            let q64: Vec<f64> = q.values.iter().map(|&x| x as f64).collect();
            let angle = projection_angle(&q64, &chunk_vectors)?;
            angles.insert(row.qid.clone(), angle);
        }
    }
    let mcea = match (dump, relevant) {
        (Some(dump_path), Some(relevant)) => {
            require(dump_path, "attention dump", "the dumping harness")?;
            manifest.input("dump", dump_path)?;
            let dump = load_attention_dump(dump_path)?;
            dump.validate()?;
            let relevant: Vec<String> =
                relevant.split(',').map(|s| s.trim().to_string()).collect();
            let noise: Vec<String> = dump
                .chunk_spans()
                .iter()
                .map(|s| s.name.clone())
                .filter(|name| !relevant.contains(name))
                .collect();
            Some(mcea_layer(&dump, &relevant, &noise)?)
        }
        (Some(_), None) => {
            return Err(CliError::Config(vec![
                "--dump requires --relevant with the comma-separated relevant chunk spans".into(),
            ]))
        }
        _ => None,
    };
    let out = AnalysisOut { angles, mcea };
    std::fs::create_dir_all(&cfg.paths.output_dir)?;
    let mut body = serde_json::to_string_pretty(&out)
        .map_err(|e| CliError::Other(format!("analysis serialization: {e}")))?;
    body.push('\n');
    std::fs::write(cfg.analysis_path(), body)?;
    manifest.output("analysis", &cfg.analysis_path())?;
    manifest.write(&cfg.manifest_dir())?;
    println!("analyzed {} query(ies)", out.angles.len());
    if let Some(mcea) = &out.mcea {
        for (layer, value) in mcea.iter().enumerate() {
            println!("mcea layer {layer}: {value:+.6}");
        }
    }
    Ok(())
}
