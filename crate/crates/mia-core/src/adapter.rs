//! Linear embedding adapter trained with a multi-task InfoNCE
//! objective.
//!
//! The adapter is a dense `d x d` matrix applied to conditioned query
//! embeddings before retrieval scoring. It starts as the identity (so
//! an untrained adapter reproduces the raw pipeline bit-for-bit) and is
//! trained with plain gradient descent on frozen embeddings. All
//! training arithmetic is `f64`; vectors cross the `f32` boundary only
//! at the embedding-service edge and in checkpoints.

use std::io::{Read, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingVector, EvidenceKind};

/// Magic bytes identifying the on-disk adapter checkpoint format.
pub const ADAPTER_MAGIC: &[u8; 7] = b"MIAADP1";

/// Consecutive over-threshold steps tolerated before training aborts.
pub const DIVERGENCE_PATIENCE: usize = 50;
/// Loss multiple of the initial loss that counts as "over threshold".
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("invalid adapter configuration: {0}")]
    InvalidConfig(String),
    #[error("tuple {index}: {reason}")]
    InvalidTuple { index: usize, reason: String },
    #[error("both task batches are empty")]
    EmptyBatch,
    #[error("non-finite gradient from tuple {index}")]
    NonFiniteGradient { index: usize },
    #[error(
        "training diverged at step {step}: loss {loss} stayed above 10x the initial loss \
         {initial} for {patience} consecutive steps"
    )]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
        patience: usize,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt adapter checkpoint: {0}")]
    Corrupt(String),
}

/// The learnable parameters plus the frozen hyperparameters they were
/// trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    dim: usize,
    /// Row-major `dim x dim` matrix.
    w: Vec<f64>,
    pub delta: f64,
    pub delta_learnable: bool,
    pub tau: f64,
    pub beta: f64,
}

/// Default residual mixing weight.
pub const DEFAULT_DELTA: f64 = 0.5;
/// Default InfoNCE temperature.
pub const DEFAULT_TAU: f64 = 0.01;
/// Default chunk-task weight in the multi-task objective.
pub const DEFAULT_BETA: f64 = 0.5;

impl AdapterParams {
    /// Identity-initialized adapter with the default hyperparameters.
    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        AdapterParams {
            dim,
            w,
            delta: DEFAULT_DELTA,
            delta_learnable: false,
            tau: DEFAULT_TAU,
            beta: DEFAULT_BETA,
        }
    }

    /// Builds an adapter from explicit parts, validating every field.
    /// `w` is the row-major `dim x dim` matrix.
    pub fn from_parts(
        dim: usize,
        w: Vec<f64>,
        delta: f64,
        delta_learnable: bool,
        tau: f64,
        beta: f64,
    ) -> Result<Self, AdapterError> {
        let params = AdapterParams { dim, w, delta, delta_learnable, tau, beta };
        params.validate()?;
        Ok(params)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major matrix entries.
    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.dim == 0 {
            return Err(AdapterError::InvalidConfig("dimension is zero".into()));
        }
        if self.w.len() != self.dim * self.dim {
            return Err(AdapterError::InvalidConfig(format!(
                "weight matrix has {} entries, expected {}",
                self.w.len(),
                self.dim * self.dim
            )));
        }
        if !self.w.iter().all(|v| v.is_finite()) {
            return Err(AdapterError::InvalidConfig("non-finite weight".into()));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(AdapterError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(AdapterError::InvalidConfig(format!(
                "task weight must lie in [0,1], got {}",
                self.beta
            )));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(AdapterError::InvalidConfig(format!(
                "residual weight must lie in [0,1], got {}",
                self.delta
            )));
        }
        Ok(())
    }

    /// True when `W` is exactly the identity matrix.
    pub fn is_identity(&self) -> bool {
        self.w.iter().enumerate().all(|(idx, &v)| {
            let (i, j) = (idx / self.dim, idx % self.dim);
            v == if i == j { 1.0 } else { 0.0 }
        })
    }

    /// Applies `W` and renormalizes. The identity adapter returns the
    /// input unchanged, bit for bit, so an untrained adapter cannot
    /// perturb retrieval order.
    pub fn apply(&self, query: &EmbeddingVector) -> Result<EmbeddingVector, AdapterError> {
        if query.dim() != self.dim {
            return Err(AdapterError::InvalidConfig(format!(
                "query dimension {} does not match adapter dimension {}",
                query.dim(),
                self.dim
            )));
        }
        if self.is_identity() {
            return Ok(query.clone());
        }
        let q: Vec<f64> = query.values.iter().map(|&v| v as f64).collect();
        let u = mat_vec(&self.w, &q, self.dim);
        let norm = l2(&u);
        if norm < 1e-12 {
            return Err(AdapterError::InvalidConfig(
                "adapter output collapsed to the zero vector".into(),
            ));
        }
        Ok(EmbeddingVector {
            values: u.iter().map(|&v| (v / norm) as f32).collect(),
            normalized: true,
        })
    }
}

/// Residual ingredients carried alongside a tuple so a learnable delta
/// can re-mix the query during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualParts {
    pub h_q: EmbeddingVector,
    pub h_t: EmbeddingVector,
}

/// One training example: a conditioned query, its positive evidence
/// embedding, and zero or more negatives, all unit vectors of one
/// dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveTuple {
    pub q_tilde: EmbeddingVector,
    pub positive: EmbeddingVector,
    pub negatives: Vec<EmbeddingVector>,
    pub task: EvidenceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<ResidualParts>,
}

impl ContrastiveTuple {
    fn validate(&self, dim: usize, index: usize) -> Result<(), AdapterError> {
        let check = |v: &EmbeddingVector, what: &str| -> Result<(), AdapterError> {
            if v.dim() != dim {
                return Err(AdapterError::InvalidTuple {
                    index,
                    reason: format!("{what} has dimension {}, expected {dim}", v.dim()),
                });
            }
            if !v.values.iter().all(|x| x.is_finite()) {
                return Err(AdapterError::InvalidTuple {
                    index,
                    reason: format!("{what} contains a non-finite entry"),
                });
            }
            if !v.is_unit() {
                return Err(AdapterError::InvalidTuple {
                    index,
                    reason: format!("{what} is not unit-normalized"),
                });
            }
            Ok(())
        };
        check(&self.q_tilde, "query")?;
        check(&self.positive, "positive")?;
        for (i, n) in self.negatives.iter().enumerate() {
            check(n, &format!("negative {i}"))?;
        }
        if let Some(parts) = &self.residual {
            check(&parts.h_q, "residual h_q")?;
            check(&parts.h_t, "residual h_t")?;
        }
        Ok(())
    }
}

fn mat_vec(w: &[f64], x: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let row = &w[i * d..(i + 1) * d];
            row.iter().zip(x).map(|(a, b)| a * b).sum()
        })
        .collect()
}

fn mat_t_vec(w: &[f64], x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 0..d {
        let xi = x[i];
        for j in 0..d {
            out[j] += w[i * d + j] * xi;
        }
    }
    out
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn to_unit_f64(v: &EmbeddingVector) -> Vec<f64> {
    let mut out: Vec<f64> = v.values.iter().map(|&x| x as f64).collect();
    let n = l2(&out);
    if n > 0.0 {
        for x in &mut out {
            *x /= n;
        }
    }
    out
}

/// The effective query for a tuple: a learnable delta re-mixes the
/// residual ingredients at full `f64` precision, otherwise the frozen
/// `q_tilde` is used as stored.
fn effective_query(
    tuple: &ContrastiveTuple,
    params: &AdapterParams,
) -> (Vec<f64>, Option<(Vec<f64>, Vec<f64>, f64)>) {
    if params.delta_learnable {
        if let Some(parts) = &tuple.residual {
            let hq: Vec<f64> = parts.h_q.values.iter().map(|&x| x as f64).collect();
            let ht: Vec<f64> = parts.h_t.values.iter().map(|&x| x as f64).collect();
            let v: Vec<f64> = hq
                .iter()
                .zip(&ht)
                .map(|(a, b)| params.delta * a + (1.0 - params.delta) * b)
                .collect();
            let nv = l2(&v);
            if nv >= 1e-12 {
                let q = v.iter().map(|x| x / nv).collect();
                return (q, Some((hq, ht, nv)));
            }
        }
    }
    (to_unit_f64(&tuple.q_tilde), None)
}

struct TupleForward {
    q: Vec<f64>,
    residual: Option<(Vec<f64>, Vec<f64>, f64)>,
    nu: f64,
    z: Vec<f64>,
    /// Candidate vectors, positive first.
    cands: Vec<Vec<f64>>,
    /// Softmax over scores / tau.
    probs: Vec<f64>,
    loss: f64,
}

fn forward(
    tuple: &ContrastiveTuple,
    params: &AdapterParams,
    index: usize,
) -> Result<TupleForward, AdapterError> {
    tuple.validate(params.dim, index)?;
    let (q, residual) = effective_query(tuple, params);
    let u = mat_vec(&params.w, &q, params.dim);
    let nu = l2(&u);
    if nu < 1e-12 {
        return Err(AdapterError::InvalidTuple {
            index,
            reason: "adapted query collapsed to the zero vector".into(),
        });
    }
    let z: Vec<f64> = u.iter().map(|x| x / nu).collect();
    let mut cands = Vec::with_capacity(1 + tuple.negatives.len());
    cands.push(to_unit_f64(&tuple.positive));
    for n in &tuple.negatives {
        cands.push(to_unit_f64(n));
    }
    let scaled: Vec<f64> = cands.iter().map(|d| dot(&z, d) / params.tau).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = scaled.iter().map(|s| (s - m).exp()).sum();
    let loss = if tuple.negatives.is_empty() {
        0.0
    } else {
        m + sum_exp.ln() - scaled[0]
    };
    let probs = scaled.iter().map(|s| (s - m).exp() / sum_exp).collect();
    if !loss.is_finite() {
        return Err(AdapterError::InvalidTuple {
            index,
            reason: format!("non-finite loss {loss}"),
        });
    }
    Ok(TupleForward {
        q,
        residual,
        nu,
        z,
        cands,
        probs,
        loss,
    })
}

/// InfoNCE loss for one tuple: softmax cross-entropy of the positive
/// against the candidate pool at temperature `tau`, max-stabilized.
/// With no negatives the pool is the positive alone and the loss is 0
/// exactly.
pub fn infonce_loss(tuple: &ContrastiveTuple, params: &AdapterParams) -> Result<f64, AdapterError> {
    params.validate()?;
    Ok(forward(tuple, params, 0)?.loss)
}

/// Combines per-task mean losses with weight `beta` on the chunk task.
/// An absent task contributes zero while the weights stay as
/// configured; both tasks absent is an error.
pub fn combine_weighted(
    chunk_mean: Option<f64>,
    node_mean: Option<f64>,
    beta: f64,
) -> Result<f64, AdapterError> {
    if chunk_mean.is_none() && node_mean.is_none() {
        return Err(AdapterError::EmptyBatch);
    }
    Ok(beta * chunk_mean.unwrap_or(0.0) + (1.0 - beta) * node_mean.unwrap_or(0.0))
}

fn mean_loss(batch: &[&ContrastiveTuple], params: &AdapterParams) -> Result<Option<f64>, AdapterError> {
    if batch.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for (i, t) in batch.iter().enumerate() {
        total += forward(t, params, i)?.loss;
    }
    Ok(Some(total / batch.len() as f64))
}

/// Multi-task objective: `beta * mean(chunk losses) + (1 - beta) *
/// mean(node losses)`.
pub fn multitask_loss(
    batch_c: &[ContrastiveTuple],
    batch_n: &[ContrastiveTuple],
    params: &AdapterParams,
) -> Result<f64, AdapterError> {
    params.validate()?;
    let c: Vec<&ContrastiveTuple> = batch_c.iter().collect();
    let n: Vec<&ContrastiveTuple> = batch_n.iter().collect();
    combine_weighted(mean_loss(&c, params)?, mean_loss(&n, params)?, params.beta)
}

/// Splits a mixed batch by task and evaluates the multi-task loss.
pub fn batch_loss(batch: &[ContrastiveTuple], params: &AdapterParams) -> Result<f64, AdapterError> {
    params.validate()?;
    let c: Vec<&ContrastiveTuple> = batch.iter().filter(|t| t.task == EvidenceKind::Chunk).collect();
    let n: Vec<&ContrastiveTuple> = batch.iter().filter(|t| t.task == EvidenceKind::Node).collect();
    combine_weighted(mean_loss(&c, params)?, mean_loss(&n, params)?, params.beta)
}

/// Gradient of the multi-task loss.
#[derive(Debug, Clone)]
pub struct AdapterGradient {
    /// Row-major `d x d` gradient with respect to `W`.
    pub d_w: Vec<f64>,
    /// Gradient with respect to delta; zero unless delta is learnable
    /// and residual ingredients are present.
    pub d_delta: f64,
}

impl AdapterGradient {
    pub fn norm(&self) -> f64 {
        (self.d_w.iter().map(|x| x * x).sum::<f64>() + self.d_delta * self.d_delta).sqrt()
    }
}

/// Analytic gradient of [`batch_loss`] over a mixed batch, including
/// the Jacobian of the post-`W` renormalization (and of the residual
/// mix when delta is learnable).
pub fn grad_loss(
    batch: &[ContrastiveTuple],
    params: &AdapterParams,
) -> Result<AdapterGradient, AdapterError> {
    params.validate()?;
    let d = params.dim;
    let n_c = batch.iter().filter(|t| t.task == EvidenceKind::Chunk).count();
    let n_n = batch.len() - n_c;
    if n_c == 0 && n_n == 0 {
        return Err(AdapterError::EmptyBatch);
    }
    let mut d_w = vec![0.0; d * d];
    let mut d_delta = 0.0;
    for (index, tuple) in batch.iter().enumerate() {
        let coef = match tuple.task {
            EvidenceKind::Chunk => params.beta / n_c as f64,
            EvidenceKind::Node => (1.0 - params.beta) / n_n as f64,
        };
        if coef == 0.0 {
            continue;
        }
        let f = forward(tuple, params, index)?;
        // dL/ds_i = (p_i - [i == positive]) / tau; g_z = sum_i dL/ds_i * d_i.
        let mut g_z = vec![0.0; d];
        for (i, cand) in f.cands.iter().enumerate() {
            let w = (f.probs[i] - if i == 0 { 1.0 } else { 0.0 }) / params.tau;
            for k in 0..d {
                g_z[k] += w * cand[k];
            }
        }
        // Through z = u / |u|: g_u = (g_z - (z . g_z) z) / |u|.
        let zg = dot(&f.z, &g_z);
        let g_u: Vec<f64> = (0..d).map(|k| (g_z[k] - zg * f.z[k]) / f.nu).collect();
        // dL/dW = g_u q^T.
        for i in 0..d {
            for j in 0..d {
                d_w[i * d + j] += coef * g_u[i] * f.q[j];
            }
        }
        if let Some((hq, ht, nv)) = &f.residual {
            // q = v / |v| with v = delta h_q + (1 - delta) h_t.
            let g_q = mat_t_vec(&params.w, &g_u, d);
            let vp: Vec<f64> = hq.iter().zip(ht).map(|(a, b)| a - b).collect();
            let qvp = dot(&f.q, &vp);
            let dq_ddelta: Vec<f64> = (0..d).map(|k| (vp[k] - qvp * f.q[k]) / nv).collect();
            d_delta += coef * dot(&g_q, &dq_ddelta);
        }
        if !d_w.iter().all(|v| v.is_finite()) || !d_delta.is_finite() {
            return Err(AdapterError::NonFiniteGradient { index });
        }
    }
    Ok(AdapterGradient { d_w, d_delta })
}

/// Training schedule and hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_ratio: f64,
    pub delta: f64,
    pub delta_learnable: bool,
    pub tau: f64,
    pub beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            steps: 2000,
            batch_size: 32,
            seed: 0,
            warmup_ratio: 0.1,
            delta: DEFAULT_DELTA,
            delta_learnable: false,
            tau: DEFAULT_TAU,
            beta: DEFAULT_BETA,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), AdapterError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(AdapterError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(AdapterError::InvalidConfig("batch size is zero".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(AdapterError::InvalidConfig(format!(
                "warmup ratio must lie in [0,1], got {}",
                self.warmup_ratio
            )));
        }
        Ok(())
    }

    /// Learning rate at a zero-based step: linear warmup over
    /// `ceil(warmup_ratio * steps)` steps, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = (self.warmup_ratio * self.steps as f64).ceil() as usize;
        if warmup == 0 || step + 1 >= warmup {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / warmup as f64
        }
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Watches for sustained divergence: aborts after
/// [`DIVERGENCE_PATIENCE`] consecutive losses above
/// [`DIVERGENCE_FACTOR`] times the initial loss.
#[derive(Debug, Clone)]
pub struct DivergenceMonitor {
    threshold: f64,
    initial: f64,
    consecutive: usize,
}

impl DivergenceMonitor {
    pub fn new(initial_loss: f64) -> Self {
        DivergenceMonitor {
            threshold: DIVERGENCE_FACTOR * initial_loss,
            initial: initial_loss,
            consecutive: 0,
        }
    }

    /// Records one step's loss; returns an error once the patience is
    /// exhausted.
    pub fn observe(&mut self, step: usize, loss: f64) -> Result<(), AdapterError> {
        if loss > self.threshold {
            self.consecutive += 1;
        } else {
            self.consecutive = 0;
        }
        if self.consecutive >= DIVERGENCE_PATIENCE {
            return Err(AdapterError::Diverged {
                step,
                loss,
                initial: self.initial,
                patience: DIVERGENCE_PATIENCE,
            });
        }
        Ok(())
    }
}

/// A trained adapter plus its per-step loss trace.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: AdapterParams,
    pub trace: Vec<TraceRow>,
}

impl TrainResult {
    /// Monotone (running-minimum) envelope of the loss trace, for
    /// inspecting descent without step-to-step batch noise.
    pub fn smoothed_losses(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.trace
            .iter()
            .map(|r| {
                best = best.min(r.loss);
                best
            })
            .collect()
    }
}

/// Trains an identity-initialized adapter with seeded-shuffle gradient
/// descent. Deterministic: a fixed seed reproduces `W` bit for bit.
pub fn train(
    dataset: &[ContrastiveTuple],
    config: &TrainConfig,
) -> Result<TrainResult, AdapterError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(AdapterError::EmptyBatch);
    }
    let dim = dataset[0].q_tilde.dim();
    let mut params = AdapterParams::identity(dim);
    params.delta = config.delta;
    params.delta_learnable = config.delta_learnable;
    params.tau = config.tau;
    params.beta = config.beta;
    params.validate()?;
    for (i, t) in dataset.iter().enumerate() {
        t.validate(dim, i)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut trace = Vec::with_capacity(config.steps);
    let mut monitor: Option<DivergenceMonitor> = None;

    for step in 0..config.steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let batch: Vec<ContrastiveTuple> =
            order[cursor..end].iter().map(|&i| dataset[i].clone()).collect();
        cursor = end;

        let loss = batch_loss(&batch, &params)?;
        let monitor = monitor.get_or_insert_with(|| DivergenceMonitor::new(loss));
        monitor.observe(step, loss)?;

        let grad = grad_loss(&batch, &params)?;
        let lr = config.lr_at(step);
        for (w, g) in params.w.iter_mut().zip(&grad.d_w) {
            *w -= lr * g;
        }
        if config.delta_learnable {
            params.delta = (params.delta - lr * grad.d_delta).clamp(0.0, 1.0);
        }
        trace.push(TraceRow { step, loss, lr });
    }
    Ok(TrainResult { params, trace })
}

/// Writes the training trace as CSV with a `step,loss,lr` header.
pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<(), AdapterError> {
    let mut out = String::from("step,loss,lr\n");
    for row in trace {
        out.push_str(&format!("{},{},{}\n", row.step, row.loss, row.lr));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Saves a checkpoint: magic, `d` (u32), row-major `f32` weights, then
/// `f32` delta, tau, beta, all little-endian.
pub fn save_adapter(params: &AdapterParams, path: &Path) -> Result<(), AdapterError> {
    params.validate()?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(ADAPTER_MAGIC)?;
    file.write_all(&(params.dim as u32).to_le_bytes())?;
    for &w in &params.w {
        file.write_all(&(w as f32).to_le_bytes())?;
    }
    for v in [params.delta, params.tau, params.beta] {
        file.write_all(&(v as f32).to_le_bytes())?;
    }
    file.into_inner()
        .map_err(|e| AdapterError::Io(e.into_error()))?
        .sync_all()?;
    Ok(())
}

/// Loads a checkpoint written by [`save_adapter`]. The learnable-delta
/// flag is not part of the format; loaded adapters treat delta as
/// fixed.
pub fn load_adapter(path: &Path) -> Result<AdapterParams, AdapterError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 7];
    file.read_exact(&mut magic)
        .map_err(|_| AdapterError::Corrupt("file shorter than the magic header".into()))?;
    if &magic != ADAPTER_MAGIC {
        return Err(AdapterError::Corrupt(format!(
            "bad magic {:?}, expected {:?}",
            magic, ADAPTER_MAGIC
        )));
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf)
        .map_err(|_| AdapterError::Corrupt("truncated dimension field".into()))?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    if dim == 0 {
        return Err(AdapterError::Corrupt("zero dimension".into()));
    }
    let mut w = Vec::with_capacity(dim * dim);
    let mut f32buf = [0u8; 4];
    for i in 0..dim * dim {
        file.read_exact(&mut f32buf)
            .map_err(|_| AdapterError::Corrupt(format!("truncated weight matrix at entry {i}")))?;
        w.push(f32::from_le_bytes(f32buf) as f64);
    }
    let mut scalars = [0.0f64; 3];
    for (i, s) in scalars.iter_mut().enumerate() {
        file.read_exact(&mut f32buf)
            .map_err(|_| AdapterError::Corrupt(format!("truncated scalar {i}")))?;
        *s = f32::from_le_bytes(f32buf) as f64;
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(AdapterError::Corrupt(format!(
            "{} trailing bytes after the checkpoint payload",
            rest.len()
        )));
    }
    let params = AdapterParams {
        dim,
        w,
        delta: scalars[0],
        delta_learnable: false,
        tau: scalars[1],
        beta: scalars[2],
    };
    params.validate()?;
    Ok(params)
}
