//! Mindscape-aware retrieval engine.
//!
//! The crate builds a document-level "mindscape" (hierarchical chunk
//! summaries plus a global summary), conditions retrieval queries on it,
//! annotates silver evidence for training, trains a linear embedding
//! adapter with a multi-task InfoNCE objective, and ships the metrics
//! used to inspect what the conditioned retriever actually attends to.
//!
//! Modules follow the pipeline order: [`corpus`] ingests and chunks raw
//! documents, [`gateway`] talks to chat/embedding services (with a fully
//! deterministic mock for offline runs), [`mindscape`] builds summaries
//! and entity nodes, [`embedding`] composes and conditions queries,
//! [`index`] provides exact cosine retrieval, [`silver`] runs the
//! annotation algorithm, [`adapter`] trains the linear projection,
//! [`eval`] scores predictions, [`analysis`] computes attention-based
//! diagnostics, and [`ragflow`] wires retrieval into answer generation.

pub mod adapter;
pub mod analysis;
pub mod corpus;
pub mod embedding;
pub mod eval;
pub mod gateway;
pub mod index;
pub mod mindscape;
pub mod ragflow;
pub mod silver;
pub mod util;

pub use embedding::EvidenceKind;
