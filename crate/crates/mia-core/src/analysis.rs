//! Interpretability metrics computed from model tensor dumps.
//!
//! Dumps are produced externally (they require white-box access to a
//! model) and carry either head-averaged attention matrices or
//! residual-stream hidden states. This module computes:
//!
//! * MCEA — per-layer alignment between chunk-to-summary attention and
//!   query-to-chunk attention, contrasting relevant against noise
//!   chunks;
//! * projection angles between a query vector and the subspace spanned
//!   by a document's chunk vectors;
//! * the layer-wise fraction of silver chunks retrieved when an
//!   intermediate hidden state is used as the query.

use std::collections::HashSet;
use std::io::{Read, Write as _};
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::embedding::EmbeddingVector;
use crate::index::Collection;

/// Magic bytes identifying the on-disk dump format.
pub const DUMP_MAGIC: &[u8; 7] = b"MIADMP1";

/// Variance below which a z-score is defined as zero.
pub const DEGENERATE_SIGMA: f64 = 1e-12;
/// Relative singular-value cutoff for the rank-revealing basis.
pub const RANK_TOLERANCE: f64 = 1e-10;
/// Attention rows must sum to one within this tolerance.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Span names reserved for the non-chunk regions of a sequence.
pub const SUMMARY_SPAN: &str = "summary";
pub const QUERY_SPAN: &str = "query";

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("span {name:?} missing from the dump")]
    MissingSpan { name: String },
    #[error("chunk sets must be nonempty: {which} is empty")]
    EmptySet { which: &'static str },
    #[error("chunk {id:?} appears in both the relevant and noise sets")]
    Overlap { id: String },
    #[error("z-scores need at least two chunks; the dump has {got}")]
    SingletonChunkSet { got: usize },
    #[error("span layout mismatch at {name:?}")]
    SpanLayoutMismatch { name: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("query vector is zero")]
    ZeroQuery,
    #[error("no chunk vectors given")]
    NoChunkVectors,
    #[error("invalid dump: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt dump file: {0}")]
    Corrupt(String),
    #[error("index: {0}")]
    Index(#[from] crate::index::IndexError),
    #[error("embedding: {0}")]
    Embed(#[from] crate::embedding::EmbedError),
}

/// A named token range `[start, end)` within the dumped sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

/// Head-averaged attention matrices for one forward pass. Row =
/// destination token, column = source token.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub seq_len: usize,
    pub spans: Vec<Span>,
    /// One `seq_len * seq_len` row-major matrix per layer.
    pub layers: Vec<Vec<f32>>,
}

/// Residual-stream states of the final/pooling token, one vector per
/// layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenDump {
    pub dim: usize,
    pub layers: Vec<Vec<f32>>,
}

impl AttentionDump {
    fn span(&self, name: &str) -> Result<&Span, AnalysisError> {
        self.spans
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| AnalysisError::MissingSpan { name: name.to_string() })
    }

    /// All spans that are not the summary or query region, in table
    /// order.
    pub fn chunk_spans(&self) -> Vec<&Span> {
        self.spans
            .iter()
            .filter(|s| s.name != SUMMARY_SPAN && s.name != QUERY_SPAN)
            .collect()
    }

    /// Checks the structural invariants: finite entries, row sums of
    /// one, and disjoint in-bounds spans.
    pub fn validate(&self) -> Result<(), AnalysisError> {
        for (l, matrix) in self.layers.iter().enumerate() {
            if matrix.len() != self.seq_len * self.seq_len {
                return Err(AnalysisError::Invalid(format!(
                    "layer {l} has {} entries, expected {}",
                    matrix.len(),
                    self.seq_len * self.seq_len
                )));
            }
            for (r, row) in matrix.chunks(self.seq_len).enumerate() {
                if !row.iter().all(|v| v.is_finite()) {
                    return Err(AnalysisError::Invalid(format!(
                        "non-finite attention at layer {l} row {r}"
                    )));
                }
                let sum: f64 = row.iter().map(|&v| v as f64).sum();
                if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(AnalysisError::Invalid(format!(
                        "layer {l} row {r} sums to {sum}, expected 1"
                    )));
                }
            }
        }
        let mut occupied = vec![false; self.seq_len];
        for s in &self.spans {
            if s.start >= s.end || s.end > self.seq_len {
                return Err(AnalysisError::Invalid(format!(
                    "span {:?} [{}, {}) is out of bounds for length {}",
                    s.name, s.start, s.end, self.seq_len
                )));
            }
            for slot in &mut occupied[s.start..s.end] {
                if *slot {
                    return Err(AnalysisError::Invalid(format!(
                        "span {:?} overlaps another span",
                        s.name
                    )));
                }
                *slot = true;
            }
        }
        Ok(())
    }
}

impl HiddenDump {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        for (l, state) in self.layers.iter().enumerate() {
            if state.len() != self.dim {
                return Err(AnalysisError::Invalid(format!(
                    "layer {l} has dimension {}, expected {}",
                    state.len(),
                    self.dim
                )));
            }
            if !state.iter().all(|v| v.is_finite()) {
                return Err(AnalysisError::Invalid(format!(
                    "non-finite hidden state at layer {l}"
                )));
            }
        }
        Ok(())
    }
}

/// Mean attention from the rows of `dst` to the columns of `src`.
fn block_mean(matrix: &[f32], seq_len: usize, dst: &Span, src: &Span) -> f64 {
    let mut total = 0.0;
    for r in dst.start..dst.end {
        let row = &matrix[r * seq_len..(r + 1) * seq_len];
        for c in src.start..src.end {
            total += row[c] as f64;
        }
    }
    total / ((dst.end - dst.start) * (src.end - src.start)) as f64
}

/// Population z-scores; degenerate variance maps every score to zero.
fn z_scores(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let sigma = (values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
    if sigma < DEGENERATE_SIGMA {
        vec![0.0; values.len()]
    } else {
        values.iter().map(|v| (v - mu) / sigma).collect()
    }
}

/// Per-layer MCEA: the mean z-scored product of chunk-to-summary and
/// query-to-chunk attention over the relevant chunks, minus the same
/// mean over the noise chunks. Z-scores are taken across every chunk
/// span in the dump.
pub fn mcea_layer(
    dump: &AttentionDump,
    relevant: &[String],
    noise: &[String],
) -> Result<Vec<f64>, AnalysisError> {
    if relevant.is_empty() {
        return Err(AnalysisError::EmptySet { which: "relevant" });
    }
    if noise.is_empty() {
        return Err(AnalysisError::EmptySet { which: "noise" });
    }
    let noise_set: HashSet<&str> = noise.iter().map(String::as_str).collect();
    if let Some(id) = relevant.iter().find(|r| noise_set.contains(r.as_str())) {
        return Err(AnalysisError::Overlap { id: id.clone() });
    }
    let summary = dump.span(SUMMARY_SPAN)?.clone();
    let query = dump.span(QUERY_SPAN)?.clone();
    let chunks = dump.chunk_spans();
    if chunks.len() < 2 {
        return Err(AnalysisError::SingletonChunkSet { got: chunks.len() });
    }
    let position = |id: &String| -> Result<usize, AnalysisError> {
        chunks
            .iter()
            .position(|s| s.name == *id)
            .ok_or_else(|| AnalysisError::MissingSpan { name: id.clone() })
    };
    let relevant_idx: Vec<usize> = relevant.iter().map(position).collect::<Result<_, _>>()?;
    let noise_idx: Vec<usize> = noise.iter().map(position).collect::<Result<_, _>>()?;

    let mut out = Vec::with_capacity(dump.layers.len());
    for matrix in &dump.layers {
        // M: chunk tokens attending to summary tokens.
        let m: Vec<f64> = chunks
            .iter()
            .map(|c| block_mean(matrix, dump.seq_len, c, &summary))
            .collect();
        // S: query tokens attending to chunk tokens.
        let s: Vec<f64> = chunks
            .iter()
            .map(|c| block_mean(matrix, dump.seq_len, &query, c))
            .collect();
        let zm = z_scores(&m);
        let zs = z_scores(&s);
        let c_scores: Vec<f64> = zm.iter().zip(&zs).map(|(a, b)| a * b).collect();
        let mean_of = |idx: &[usize]| -> f64 {
            idx.iter().map(|&i| c_scores[i]).sum::<f64>() / idx.len() as f64
        };
        out.push(mean_of(&relevant_idx) - mean_of(&noise_idx));
    }
    Ok(out)
}

/// Angle in degrees between `q` and its orthogonal projection onto the
/// span of the chunk vectors, via a rank-revealing SVD (singular
/// values below `RANK_TOLERANCE * sigma_max` are treated as zero).
pub fn projection_angle(q: &[f64], chunk_vectors: &[Vec<f64>]) -> Result<f64, AnalysisError> {
    if chunk_vectors.is_empty() {
        return Err(AnalysisError::NoChunkVectors);
    }
    let d = q.len();
    for v in chunk_vectors {
        if v.len() != d {
            return Err(AnalysisError::DimensionMismatch {
                expected: d,
                got: v.len(),
            });
        }
    }
    let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if qn < 1e-12 {
        return Err(AnalysisError::ZeroQuery);
    }
    let matrix = DMatrix::from_fn(d, chunk_vectors.len(), |r, c| chunk_vectors[c][r]);
    let svd = matrix.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = RANK_TOLERANCE * sigma_max;
    // Projection of q onto the span: sum of components along the
    // basis columns whose singular values survive the cutoff.
    let mut proj_sq = 0.0;
    for (i, &sigma) in svd.singular_values.iter().enumerate() {
        if sigma > tol && sigma > 0.0 {
            let col = u.column(i);
            let coeff: f64 = col.iter().zip(q).map(|(a, b)| a * b).sum();
            proj_sq += coeff * coeff;
        }
    }
    let ratio = (proj_sq.sqrt() / qn).clamp(0.0, 1.0);
    Ok(ratio.acos().to_degrees())
}

/// Per-layer fraction of silver chunks among the top-`k` retrieved
/// when the layer's hidden state is used as the query, averaged over
/// queries. Every dump must share one layer count and the collection's
/// dimension.
pub fn layer_silver_ratio(
    queries: &[(HiddenDump, HashSet<String>)],
    collection: &Collection,
    k: usize,
) -> Result<Vec<f64>, AnalysisError> {
    if queries.is_empty() {
        return Err(AnalysisError::Invalid("no query dumps given".into()));
    }
    if collection.is_empty() {
        return Err(AnalysisError::Invalid("empty chunk collection".into()));
    }
    let layer_count = queries[0].0.layers.len();
    for (dump, _) in queries {
        dump.validate()?;
        if dump.dim != collection.dim() {
            return Err(AnalysisError::DimensionMismatch {
                expected: collection.dim(),
                got: dump.dim,
            });
        }
        if dump.layers.len() != layer_count {
            return Err(AnalysisError::Invalid(format!(
                "dumps disagree on layer count: {} vs {layer_count}",
                dump.layers.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(layer_count);
    for layer in 0..layer_count {
        let mut total = 0.0;
        for (dump, silver) in queries {
            let query = EmbeddingVector {
                values: dump.layers[layer].clone(),
                normalized: false,
            }
            .normalize()?;
            let hits = collection.top_k(&query, k)?;
            let found = hits.iter().filter(|h| silver.contains(&h.id)).count();
            total += found as f64 / hits.len() as f64;
        }
        out.push(total / queries.len() as f64);
    }
    Ok(out)
}

/// Per-layer MCEA difference between an original dump and a
/// summary-replaced control with the identical span layout.
pub fn summary_replaced_control(
    original: &AttentionDump,
    replaced: &AttentionDump,
    relevant: &[String],
    noise: &[String],
) -> Result<Vec<f64>, AnalysisError> {
    if let Some((a, _)) = original
        .spans
        .iter()
        .zip(&replaced.spans)
        .find(|(a, b)| a != b)
    {
        return Err(AnalysisError::SpanLayoutMismatch { name: a.name.clone() });
    }
    if original.spans.len() != replaced.spans.len() {
        let longer = if original.spans.len() > replaced.spans.len() {
            &original.spans
        } else {
            &replaced.spans
        };
        return Err(AnalysisError::SpanLayoutMismatch {
            name: longer[original.spans.len().min(replaced.spans.len())].name.clone(),
        });
    }
    if original.layers.len() != replaced.layers.len() {
        return Err(AnalysisError::Invalid(format!(
            "layer count mismatch: {} vs {}",
            original.layers.len(),
            replaced.layers.len()
        )));
    }
    let a = mcea_layer(original, relevant, noise)?;
    let b = mcea_layer(replaced, relevant, noise)?;
    Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
}

const KIND_ATTN: &[u8; 4] = b"ATTN";
const KIND_HIDN: &[u8; 4] = b"HIDN";

fn write_header(
    out: &mut impl std::io::Write,
    kind: &[u8; 4],
    layers: usize,
    width: usize,
    spans: &[Span],
) -> std::io::Result<()> {
    out.write_all(DUMP_MAGIC)?;
    out.write_all(kind)?;
    out.write_all(&(layers as u32).to_le_bytes())?;
    out.write_all(&(width as u32).to_le_bytes())?;
    out.write_all(&(spans.len() as u32).to_le_bytes())?;
    for s in spans {
        out.write_all(&(s.name.len() as u32).to_le_bytes())?;
        out.write_all(s.name.as_bytes())?;
        out.write_all(&(s.start as u32).to_le_bytes())?;
        out.write_all(&(s.end as u32).to_le_bytes())?;
    }
    Ok(())
}

/// Saves an attention dump in the MIADMP1 layout.
pub fn save_attention_dump(dump: &AttentionDump, path: &Path) -> Result<(), AnalysisError> {
    dump.validate()?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut file, KIND_ATTN, dump.layers.len(), dump.seq_len, &dump.spans)?;
    for matrix in &dump.layers {
        for &v in matrix {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.into_inner()
        .map_err(|e| AnalysisError::Io(e.into_error()))?
        .sync_all()?;
    Ok(())
}

/// Saves a hidden-state dump in the MIADMP1 layout (no span table).
pub fn save_hidden_dump(dump: &HiddenDump, path: &Path) -> Result<(), AnalysisError> {
    dump.validate()?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut file, KIND_HIDN, dump.layers.len(), dump.dim, &[])?;
    for state in &dump.layers {
        for &v in state {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.into_inner()
        .map_err(|e| AnalysisError::Io(e.into_error()))?
        .sync_all()?;
    Ok(())
}

struct DumpHeader {
    kind: [u8; 4],
    layers: usize,
    width: usize,
    spans: Vec<Span>,
}

fn read_header(file: &mut impl Read) -> Result<DumpHeader, AnalysisError> {
    let mut magic = [0u8; 7];
    file.read_exact(&mut magic)
        .map_err(|_| AnalysisError::Corrupt("file shorter than the magic header".into()))?;
    if &magic != DUMP_MAGIC {
        return Err(AnalysisError::Corrupt(format!(
            "bad magic {magic:?}, expected {DUMP_MAGIC:?}"
        )));
    }
    let mut kind = [0u8; 4];
    file.read_exact(&mut kind)
        .map_err(|_| AnalysisError::Corrupt("truncated kind tag".into()))?;
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |file: &mut dyn Read, what: &str| -> Result<usize, AnalysisError> {
        file.read_exact(&mut u32buf)
            .map_err(|_| AnalysisError::Corrupt(format!("truncated {what}")))?;
        Ok(u32::from_le_bytes(u32buf) as usize)
    };
    let layers = read_u32(file, "layer count")?;
    let width = read_u32(file, "width field")?;
    let span_count = read_u32(file, "span count")?;
    let mut spans = Vec::with_capacity(span_count);
    for i in 0..span_count {
        let name_len = read_u32(file, &format!("span {i} name length"))?;
        let mut name = vec![0u8; name_len];
        file.read_exact(&mut name)
            .map_err(|_| AnalysisError::Corrupt(format!("truncated span {i} name")))?;
        let name = String::from_utf8(name)
            .map_err(|_| AnalysisError::Corrupt(format!("span {i} name is not UTF-8")))?;
        let start = read_u32(file, &format!("span {i} start"))?;
        let end = read_u32(file, &format!("span {i} end"))?;
        spans.push(Span { name, start, end });
    }
    Ok(DumpHeader {
        kind,
        layers,
        width,
        spans,
    })
}

fn read_f32s(file: &mut impl Read, count: usize, what: &str) -> Result<Vec<f32>, AnalysisError> {
    let mut bytes = vec![0u8; count * 4];
    file.read_exact(&mut bytes)
        .map_err(|_| AnalysisError::Corrupt(format!("truncated {what}")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn expect_eof(file: &mut impl Read) -> Result<(), AnalysisError> {
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(AnalysisError::Corrupt(format!(
            "{} trailing bytes after the tensor payload",
            rest.len()
        )));
    }
    Ok(())
}

/// Loads and validates an attention dump.
pub fn load_attention_dump(path: &Path) -> Result<AttentionDump, AnalysisError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let header = read_header(&mut file)?;
    if &header.kind != KIND_ATTN {
        return Err(AnalysisError::Corrupt(format!(
            "kind {:?} is not an attention dump",
            String::from_utf8_lossy(&header.kind)
        )));
    }
    let mut layers = Vec::with_capacity(header.layers);
    for l in 0..header.layers {
        layers.push(read_f32s(
            &mut file,
            header.width * header.width,
            &format!("layer {l} attention matrix"),
        )?);
    }
    expect_eof(&mut file)?;
    let dump = AttentionDump {
        seq_len: header.width,
        spans: header.spans,
        layers,
    };
    dump.validate()?;
    Ok(dump)
}

/// Loads and validates a hidden-state dump.
pub fn load_hidden_dump(path: &Path) -> Result<HiddenDump, AnalysisError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let header = read_header(&mut file)?;
    if &header.kind != KIND_HIDN {
        return Err(AnalysisError::Corrupt(format!(
            "kind {:?} is not a hidden-state dump",
            String::from_utf8_lossy(&header.kind)
        )));
    }
    if !header.spans.is_empty() {
        return Err(AnalysisError::Corrupt(
            "hidden-state dumps carry no span table".into(),
        ));
    }
    let mut layers = Vec::with_capacity(header.layers);
    for l in 0..header.layers {
        layers.push(read_f32s(
            &mut file,
            header.width,
            &format!("layer {l} hidden state"),
        )?);
    }
    expect_eof(&mut file)?;
    let dump = HiddenDump {
        dim: header.width,
        layers,
    };
    dump.validate()?;
    Ok(dump)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn four_chunk_spans() -> Vec<Span> {
        vec![
            Span { name: SUMMARY_SPAN.into(), start: 0, end: 2 },
            Span { name: QUERY_SPAN.into(), start: 2, end: 4 },
            Span { name: "ca".into(), start: 4, end: 6 },
            Span { name: "cb".into(), start: 6, end: 8 },
            Span { name: "cc".into(), start: 8, end: 10 },
            Span { name: "cd".into(), start: 10, end: 12 },
        ]
    }

    /// Hand-built single-layer dump. Chunk-token rows attend to the
    /// two summary columns with the per-chunk weight `m` and spread
    /// the remainder uniformly; query rows attend to each chunk's two
    /// columns with weight `s` and spread the remainder over the four
    /// non-chunk columns.
    fn hand_dump(m: [f64; 4], s: [f64; 4]) -> AttentionDump {
        let seq = 12usize;
        let mut a = vec![0.0f32; seq * seq];
        let mut set = |r: usize, c: usize, v: f64| a[r * seq + c] = v as f32;
        // Summary rows: uniform.
        for r in 0..2 {
            for c in 0..seq {
                set(r, c, 1.0 / seq as f64);
            }
        }
        // Query rows.
        let s_total: f64 = s.iter().map(|x| 2.0 * x).sum();
        for r in 2..4 {
            for c in 0..4 {
                set(r, c, (1.0 - s_total) / 4.0);
            }
            for (i, &si) in s.iter().enumerate() {
                for c in (4 + 2 * i)..(6 + 2 * i) {
                    set(r, c, si);
                }
            }
        }
        // Chunk rows.
        for (i, &mi) in m.iter().enumerate() {
            for r in (4 + 2 * i)..(6 + 2 * i) {
                for c in 0..2 {
                    set(r, c, mi);
                }
                for c in 2..seq {
                    set(r, c, (1.0 - 2.0 * mi) / 10.0);
                }
            }
        }
        AttentionDump {
            seq_len: seq,
            spans: four_chunk_spans(),
            layers: vec![a],
        }
    }

    #[test]
    fn hand_dump_passes_validation() {
        hand_dump([0.125, 0.25, 0.0625, 0.1875], [0.03125, 0.125, 0.0625, 0.09375])
            .validate()
            .unwrap();
    }

    #[test]
    fn mcea_matches_the_hand_computed_oracle() {
        // All weights are multiples of 1/64, exact in f32, so the
        // oracle arithmetic carries through in f64 without dump
        // quantization error.
        // M = [8, 16, 4, 12]/64: mean 10/64, deviations [-2,6,-6,2]/64,
        // population sigma = sqrt(20)/64, z_M = [-1,3,-3,1]/sqrt(5).
        // S = [2, 8, 4, 6]/64: mean 5/64, deviations [-3,3,-1,1]/64,
        // sigma = sqrt(5)/64, z_S = [-3,3,-1,1]/sqrt(5).
        // C = z_M * z_S = [3,9,3,1]/5 = [0.6, 1.8, 0.6, 0.2];
        // mean(C[a], C[b]) - mean(C[c], C[d]) = 1.2 - 0.4 = 0.8.
        let dump = hand_dump([0.125, 0.25, 0.0625, 0.1875], [0.03125, 0.125, 0.0625, 0.09375]);
        let mcea = mcea_layer(&dump, &names(&["ca", "cb"]), &names(&["cc", "cd"])).unwrap();
        assert_eq!(mcea.len(), 1);
        assert!((mcea[0] - 0.8).abs() < 1e-10, "mcea {}", mcea[0]);
    }

    #[test]
    fn swapping_relevant_and_noise_negates_mcea_exactly() {
        let dump = hand_dump([0.125, 0.25, 0.0625, 0.1875], [0.03125, 0.125, 0.0625, 0.09375]);
        let fwd = mcea_layer(&dump, &names(&["ca", "cb"]), &names(&["cc", "cd"])).unwrap();
        let rev = mcea_layer(&dump, &names(&["cc", "cd"]), &names(&["ca", "cb"])).unwrap();
        assert_eq!(fwd[0], -rev[0]);
    }

    #[test]
    fn uniform_attention_gives_exactly_zero() {
        let seq = 12usize;
        let uniform = vec![1.0f32 / seq as f32; seq * seq];
        let dump = AttentionDump {
            seq_len: seq,
            spans: four_chunk_spans(),
            layers: vec![uniform.clone(), uniform],
        };
        let mcea = mcea_layer(&dump, &names(&["ca"]), &names(&["cb", "cc"])).unwrap();
        assert_eq!(mcea, vec![0.0, 0.0]);
    }

    #[test]
    fn constant_shift_of_all_entries_preserves_mcea() {
        let dump = hand_dump([0.125, 0.25, 0.0625, 0.1875], [0.03125, 0.125, 0.0625, 0.09375]);
        let mut shifted = dump.clone();
        for v in &mut shifted.layers[0] {
            *v += 0.25;
        }
        let a = mcea_layer(&dump, &names(&["ca", "cb"]), &names(&["cc", "cd"])).unwrap();
        let b = mcea_layer(&shifted, &names(&["ca", "cb"]), &names(&["cc", "cd"])).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-9, "{} vs {}", a[0], b[0]);
    }

    #[test]
    fn mcea_rejects_bad_chunk_sets() {
        let dump = hand_dump([0.125, 0.25, 0.0625, 0.1875], [0.03125, 0.125, 0.0625, 0.09375]);
        assert!(matches!(
            mcea_layer(&dump, &[], &names(&["cc"])),
            Err(AnalysisError::EmptySet { which: "relevant" })
        ));
        assert!(matches!(
            mcea_layer(&dump, &names(&["ca"]), &names(&["ca"])),
            Err(AnalysisError::Overlap { .. })
        ));
        assert!(matches!(
            mcea_layer(&dump, &names(&["zz"]), &names(&["cc"])),
            Err(AnalysisError::MissingSpan { .. })
        ));
        let mut single = dump.clone();
        single.spans.truncate(3);
        assert!(matches!(
            mcea_layer(&single, &names(&["ca"]), &names(&["ca"])),
            Err(AnalysisError::Overlap { .. }) | Err(AnalysisError::SingletonChunkSet { .. })
        ));
        single.spans[2].name = "only".into();
        assert!(matches!(
            mcea_layer(&single, &names(&["only"]), &names(&["other"])),
            Err(AnalysisError::SingletonChunkSet { got: 1 })
        ));
    }

    #[test]
    fn in_span_query_has_zero_angle() {
        let chunks = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let q = vec![0.3, -0.7, 0.0];
        let angle = projection_angle(&q, &chunks).unwrap();
        assert!(angle.abs() < 1e-6, "angle {angle}");
    }

    #[test]
    fn orthogonal_query_has_right_angle() {
        let chunks = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let q = vec![0.0, 0.0, 2.5];
        let angle = projection_angle(&q, &chunks).unwrap();
        assert!((angle - 90.0).abs() < 1e-6, "angle {angle}");
    }

    #[test]
    fn angle_is_invariant_to_query_scale_and_basis_recombination() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let d = 6;
        let chunks: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = projection_angle(&q, &chunks).unwrap();

        let scaled_q: Vec<f64> = q.iter().map(|x| 17.5 * x).collect();
        let scaled = projection_angle(&scaled_q, &chunks).unwrap();
        assert!((base - scaled).abs() < 1e-8, "{base} vs {scaled}");

        // Invertible recombination spanning the same subspace.
        let recombined = vec![
            chunks[0].iter().zip(&chunks[1]).map(|(a, b)| a + 2.0 * b).collect::<Vec<f64>>(),
            chunks[0].iter().zip(&chunks[2]).map(|(a, b)| 3.0 * a - b).collect(),
            chunks[1].iter().zip(&chunks[2]).map(|(a, b)| 0.5 * a + 4.0 * b).collect(),
        ];
        let re = projection_angle(&q, &recombined).unwrap();
        assert!((base - re).abs() < 1e-8, "{base} vs {re}");
    }

    #[test]
    fn angle_rejects_degenerate_input() {
        assert!(matches!(
            projection_angle(&[0.0, 0.0], &[vec![1.0, 0.0]]),
            Err(AnalysisError::ZeroQuery)
        ));
        assert!(matches!(
            projection_angle(&[1.0, 0.0], &[]),
            Err(AnalysisError::NoChunkVectors)
        ));
        assert!(matches!(
            projection_angle(&[1.0, 0.0], &[vec![1.0, 0.0, 0.0]]),
            Err(AnalysisError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rank_deficient_chunk_sets_ignore_numerical_dust() {
        // Two nearly identical chunks span one true direction; a query
        // along the second nominal direction must still read ~90 deg.
        let eps = 1e-13;
        let chunks = vec![vec![1.0, 0.0], vec![1.0, eps]];
        let q = vec![0.0, 1.0];
        let angle = projection_angle(&q, &chunks).unwrap();
        assert!((angle - 90.0).abs() < 1e-3, "angle {angle}");
    }

    fn silver_collection(dim: usize, n: usize, seed: u64) -> Collection {
        use crate::embedding::Embedder;
        let embedder = crate::embedding::MockEmbedder::new(seed, dim);
        let mut col = Collection::new("chunks", dim);
        for i in 0..n {
            let v = embedder.embed_one(&format!("chunk body {i}")).unwrap();
            col.insert(format!("c{i:04}"), v, Vec::new()).unwrap();
        }
        col
    }

    #[test]
    fn silver_ratio_finds_a_planted_state() {
        let col = silver_collection(16, 20, 4);
        let target = col.get("c0003").unwrap().vector.values.clone();
        let dump = HiddenDump {
            dim: 16,
            layers: vec![vec![0.1; 16], target],
        };
        let silver: HashSet<String> = ["c0003".to_string()].into_iter().collect();
        let ratios = layer_silver_ratio(&[(dump, silver)], &col, 10).unwrap();
        assert_eq!(ratios.len(), 2);
        // The planted final layer retrieves its silver chunk at rank 1:
        // one silver hit among ten results.
        assert!((ratios[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn silver_ratio_of_random_states_matches_density() {
        use rand_distr::{Distribution, StandardNormal};
        let n = 30usize;
        let silver_count = 6usize;
        let col = silver_collection(8, n, 9);
        let silver: HashSet<String> = (0..silver_count).map(|i| format!("c{i:04}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let queries: Vec<(HiddenDump, HashSet<String>)> = (0..200)
            .map(|_| {
                let state: Vec<f32> = (0..8)
                    .map(|_| {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        x as f32
                    })
                    .collect();
                (HiddenDump { dim: 8, layers: vec![state] }, silver.clone())
            })
            .collect();
        let ratios = layer_silver_ratio(&queries, &col, 10).unwrap();
        assert_eq!(ratios.len(), 1, "single-layer dumps give a one-point curve");
        let expected = silver_count as f64 / n as f64;
        assert!(
            (ratios[0] - expected).abs() < 0.05,
            "ratio {} vs density {expected}",
            ratios[0]
        );
    }

    #[test]
    fn silver_ratio_rejects_dimension_mismatch() {
        let col = silver_collection(16, 5, 4);
        let dump = HiddenDump { dim: 8, layers: vec![vec![0.5; 8]] };
        assert!(matches!(
            layer_silver_ratio(&[(dump, HashSet::new())], &col, 3),
            Err(AnalysisError::DimensionMismatch { expected: 16, got: 8 })
        ));
    }

    #[test]
    fn identical_dumps_have_zero_control_delta() {
        let dump = hand_dump([0.125, 0.25, 0.0625, 0.1875], [0.03125, 0.125, 0.0625, 0.09375]);
        let delta =
            summary_replaced_control(&dump, &dump, &names(&["ca", "cb"]), &names(&["cc", "cd"]))
                .unwrap();
        assert_eq!(delta, vec![0.0]);
    }

    #[test]
    fn flattened_replacement_yields_a_positive_delta() {
        let original = hand_dump([0.125, 0.25, 0.0625, 0.1875], [0.03125, 0.125, 0.0625, 0.09375]);
        // Replacement text flattens chunk-to-summary attention: all M
        // equal, so z_M = 0 everywhere and the replaced MCEA is 0.
        let replaced = hand_dump([0.15625; 4], [0.03125, 0.125, 0.0625, 0.09375]);
        let delta = summary_replaced_control(
            &original,
            &replaced,
            &names(&["ca", "cb"]),
            &names(&["cc", "cd"]),
        )
        .unwrap();
        assert!((delta[0] - 0.8).abs() < 1e-10, "delta {}", delta[0]);
        assert!(delta[0] > 0.0);
    }

    #[test]
    fn control_names_the_first_differing_span() {
        let original = hand_dump([0.125, 0.25, 0.0625, 0.1875], [0.03125, 0.125, 0.0625, 0.09375]);
        let mut other = original.clone();
        other.spans[3] = Span { name: "cx".into(), start: 6, end: 8 };
        let err = summary_replaced_control(
            &original,
            &other,
            &names(&["ca"]),
            &names(&["cc"]),
        )
        .unwrap_err();
        assert!(
            matches!(err, AnalysisError::SpanLayoutMismatch { ref name } if name == "cb"),
            "{err}"
        );
    }

    #[test]
    fn attention_dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attn.bin");
        let dump = hand_dump([0.125, 0.25, 0.0625, 0.1875], [0.03125, 0.125, 0.0625, 0.09375]);
        save_attention_dump(&dump, &path).unwrap();
        let loaded = load_attention_dump(&path).unwrap();
        assert_eq!(dump, loaded);
        // Byte-stable on re-save.
        let path2 = dir.path().join("attn2.bin");
        save_attention_dump(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn hidden_dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hidden.bin");
        let dump = HiddenDump {
            dim: 4,
            layers: vec![vec![0.1, -0.2, 0.3, -0.4], vec![1.0, 2.0, 3.0, 4.0]],
        };
        save_hidden_dump(&dump, &path).unwrap();
        assert_eq!(load_hidden_dump(&path).unwrap(), dump);
    }

    #[test]
    fn corrupt_dumps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, b"NOTDUMP").unwrap();
        assert!(matches!(
            load_attention_dump(&bad),
            Err(AnalysisError::Corrupt(_))
        ));
        let attn = dir.path().join("attn.bin");
        let dump = hand_dump([0.125, 0.25, 0.0625, 0.1875], [0.03125, 0.125, 0.0625, 0.09375]);
        save_attention_dump(&dump, &attn).unwrap();
        // Wrong-kind load fails.
        assert!(matches!(
            load_hidden_dump(&attn),
            Err(AnalysisError::Corrupt(_))
        ));
        // Trailing garbage fails.
        let mut bytes = std::fs::read(&attn).unwrap();
        bytes.extend_from_slice(&[1, 2, 3]);
        std::fs::write(&attn, &bytes).unwrap();
        match load_attention_dump(&attn) {
            Err(AnalysisError::Corrupt(msg)) => assert!(msg.contains("trailing")),
            other => panic!("expected corrupt, got {other:?}"),
        }
    }
}
