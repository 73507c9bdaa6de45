//! Exact-cosine top-K retrieval over named vector collections.
//!
//! Search is a full scan: score every entry, sort by score descending
//! with ties broken by ascending id, take the first k. Corpora here are
//! a few hundred chunks per document, so exactness (and hence
//! reproducible annotation) is worth far more than sublinear lookup.
//! Scores are f32 dot products of unit vectors — anything comparing
//! against these results (oracles, reports) must use the same
//! accumulation to be bit-compatible.
//!
//! Concurrency: `insert` takes `&mut self` and `top_k` takes `&self`,
//! so Rust's aliasing rules already give "many readers XOR one writer";
//! wrap a collection in `RwLock` to share it across threads.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::embedding::EmbeddingVector;

/// Magic bytes identifying the on-disk index format.
pub const INDEX_MAGIC: &[u8; 7] = b"MIAIDX1";

#[derive(Debug, Clone)]
pub struct Entry {
    pub id: String,
    pub vector: EmbeddingVector,
    pub payload: Vec<u8>,
}

/// A named set of unit vectors with opaque payloads.
#[derive(Debug, Clone)]
pub struct Collection {
    name: String,
    dim: usize,
    entries: Vec<Entry>,
    ids: HashSet<String>,
}

/// One ranked retrieval result.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredId {
    pub id: String,
    pub score: f32,
}

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("duplicate id {id:?} in collection {name:?}")]
    DuplicateId { name: String, id: String },
    #[error("dimension mismatch in collection {name:?}: expected {expected}, got {got}")]
    DimensionMismatch { name: String, expected: usize, got: usize },
    #[error("vector for id {id:?} is not unit-normalized (norm {norm})")]
    NotNormalized { id: String, norm: f64 },
    #[error("query vector is not unit-normalized (norm {norm})")]
    QueryNotNormalized { norm: f64 },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt index file {path}: {reason}")]
    Corrupt { path: String, reason: String },
}

impl Collection {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Collection { name: name.into(), dim, entries: Vec::new(), ids: HashSet::new() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// All ids in insertion order.
    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    /// Adds an entry. The vector must match the collection dimension
    /// and be unit-normalized; the id must be fresh. On error the
    /// collection is unchanged.
    pub fn insert(
        &mut self,
        id: impl Into<String>,
        vector: EmbeddingVector,
        payload: Vec<u8>,
    ) -> Result<(), IndexError> {
        let id = id.into();
        if vector.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                name: self.name.clone(),
                expected: self.dim,
                got: vector.dim(),
            });
        }
        if self.ids.contains(&id) {
            return Err(IndexError::DuplicateId { name: self.name.clone(), id });
        }
        if !vector.is_unit() {
            return Err(IndexError::NotNormalized { id, norm: vector.norm() });
        }
        self.ids.insert(id.clone());
        self.entries.push(Entry { id, vector, payload });
        Ok(())
    }

    /// Exact top-k by cosine (dot product of unit vectors): scores
    /// descending, ties broken by ascending id, `min(k, len)` results.
    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<ScoredId>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                name: self.name.clone(),
                expected: self.dim,
                got: query.dim(),
            });
        }
        if !query.is_unit() {
            return Err(IndexError::QueryNotNormalized { norm: query.norm() });
        }
        let mut scored: Vec<ScoredId> = self
            .entries
            .iter()
            .map(|e| ScoredId { id: e.id.clone(), score: query.dot(&e.vector) })
            .collect();
        scored.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("scores are finite")
                .then_with(|| a.id.cmp(&b.id))
        });
        scored.truncate(k);
        Ok(scored)
    }

    /// Writes the collection in the binary index format: a header
    /// (magic, dim u32, count u64, little-endian) followed per entry by
    /// a length-prefixed id, raw f32 vector bytes, and a
    /// length-prefixed payload.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let io_err = |e: std::io::Error| IndexError::Io { path: path.display().to_string(), source: e };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        w.write_all(INDEX_MAGIC).map_err(io_err)?;
        w.write_all(&(self.dim as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes()).map_err(io_err)?;
        for e in &self.entries {
            w.write_all(&(e.id.len() as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(e.id.as_bytes()).map_err(io_err)?;
            for v in &e.vector.values {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
            w.write_all(&(e.payload.len() as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(&e.payload).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    /// Loads a collection saved by [`Collection::save`]. The collection
    /// name is not stored in the file; callers supply it (usually from
    /// the file name).
    pub fn load(path: &Path, name: impl Into<String>) -> Result<Collection, IndexError> {
        let io_err = |e: std::io::Error| IndexError::Io { path: path.display().to_string(), source: e };
        let corrupt = |reason: &str| IndexError::Corrupt {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);

        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(|_| corrupt("missing header"))?;
        if &magic != INDEX_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut buf4 = [0u8; 4];
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf4).map_err(|_| corrupt("missing dim"))?;
        let dim = u32::from_le_bytes(buf4) as usize;
        if dim == 0 {
            return Err(corrupt("zero dimension"));
        }
        r.read_exact(&mut buf8).map_err(|_| corrupt("missing count"))?;
        let count = u64::from_le_bytes(buf8) as usize;

        let mut coll = Collection::new(name, dim);
        for i in 0..count {
            r.read_exact(&mut buf4).map_err(|_| corrupt(&format!("truncated id length at entry {i}")))?;
            let id_len = u32::from_le_bytes(buf4) as usize;
            let mut id_bytes = vec![0u8; id_len];
            r.read_exact(&mut id_bytes).map_err(|_| corrupt(&format!("truncated id at entry {i}")))?;
            let id = String::from_utf8(id_bytes)
                .map_err(|_| corrupt(&format!("id at entry {i} is not UTF-8")))?;

            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut buf4)
                    .map_err(|_| corrupt(&format!("truncated vector at entry {i}")))?;
                values.push(f32::from_le_bytes(buf4));
            }

            r.read_exact(&mut buf4)
                .map_err(|_| corrupt(&format!("truncated payload length at entry {i}")))?;
            let payload_len = u32::from_le_bytes(buf4) as usize;
            let mut payload = vec![0u8; payload_len];
            r.read_exact(&mut payload)
                .map_err(|_| corrupt(&format!("truncated payload at entry {i}")))?;

            coll.insert(id, EmbeddingVector { values, normalized: true }, payload)?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(io_err)? != 0 {
            return Err(corrupt("trailing bytes after last entry"));
        }
        Ok(coll)
    }
}
