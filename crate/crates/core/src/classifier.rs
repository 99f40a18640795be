//! Cosine-normalized linear heads and their concatenation.
//!
//! A head stores raw weights `C×D`. Logits are cosine similarities between the
//! L2-normalized weight rows and the L2-normalized input, so every task head
//! emits scores on the same `[−1, 1]` scale and heads from different tasks can
//! be concatenated for task-agnostic prediction.

use std::path::Path;

use rand::Rng;

use crate::binio::{self, Cursor};
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize_in_place, Matrix, NORM_EPS};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct CosineHead {
    weights: Matrix,
    task: usize,
}

/// Uniform `[−1/√D, 1/√D]` fan-in initialization.
pub fn init_head(classes: usize, dim: usize, seed: u64) -> Result<CosineHead> {
    if classes < 2 {
        return Err(Error::invalid(format!(
            "a head needs at least 2 clusters, got {classes}"
        )));
    }
    if dim == 0 {
        return Err(Error::invalid("head dimension must be positive"));
    }
    let bound = 1.0 / (dim as f64).sqrt();
    let mut rng = crate::rng::derived(seed, "head-init");
    let data = (0..classes * dim)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Ok(CosineHead {
        weights: Matrix::from_vec(classes, dim, data)?,
        task: 0,
    })
}

impl CosineHead {
    pub fn new(weights: Matrix, task: usize) -> Self {
        CosineHead { weights, task }
    }

    pub fn with_task(mut self, task: usize) -> Self {
        self.task = task;
        self
    }

    pub fn task(&self) -> usize {
        self.task
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        self.weights.as_mut_slice()
    }

    /// `l_i = ⟨θ_i/‖θ_i‖, z/‖z‖⟩`.
    pub fn cosine_logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z.len())?;
        let mut zn = z.to_vec();
        l2_normalize_in_place(&mut zn, NORM_EPS);
        let mut out = vec![0.0; self.classes()];
        self.logits_of_normalized(&zn, &mut out);
        Ok(out)
    }

    /// Logits for an input that is already unit-normalized.
    pub(crate) fn logits_of_normalized(&self, z_hat: &[f64], out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(self.weights.iter_rows()) {
            let norm = (dot(w, w) + NORM_EPS).sqrt();
            *o = (dot(w, z_hat) / norm).clamp(-1.0, 1.0);
        }
    }

    /// Logits for every row of `features`.
    pub fn batch_logits(&self, features: &Matrix) -> Result<Matrix> {
        self.check_dim(features.cols())?;
        let z_hat = normalize_rows(features);
        Ok(self.batch_logits_normalized(&z_hat))
    }

    pub(crate) fn batch_logits_normalized(&self, z_hat: &Matrix) -> Matrix {
        let c = self.classes();
        let mut out = vec![0.0; z_hat.rows() * c];
        par::fill_chunks(&mut out, c, |i, chunk| {
            self.logits_of_normalized(z_hat.row(i), chunk)
        });
        Matrix::from_vec(z_hat.rows(), c, out).expect("non-empty batch")
    }

    /// Replaces each weight row by its unit-norm version.
    pub fn renormalize_weights(&mut self) {
        let d = self.dim();
        for row in self.weights.as_mut_slice().chunks_exact_mut(d) {
            l2_normalize_in_place(row, NORM_EPS);
        }
    }

    /// Gradient of a loss w.r.t. the raw weights, given normalized inputs, the
    /// logits they produced and the loss gradient w.r.t. those logits.
    ///
    /// Row `c` is `Σ_i g_ic (ẑ_i − l_ic ŵ_c) / ‖w_c‖`.
    pub(crate) fn weight_gradient(&self, z_hat: &Matrix, logits: &Matrix, dlogits: &Matrix) -> Matrix {
        let d = self.dim();
        let mut grad = vec![0.0; self.classes() * d];
        par::fill_chunks(&mut grad, d, |c, g| {
            let w = self.weights.row(c);
            let norm = (dot(w, w) + NORM_EPS).sqrt();
            let mut radial = 0.0;
            for i in 0..z_hat.rows() {
                let gic = dlogits.get(i, c);
                if gic == 0.0 {
                    continue;
                }
                radial += gic * logits.get(i, c);
                for (gk, &zk) in g.iter_mut().zip(z_hat.row(i)) {
                    *gk += gic * zk;
                }
            }
            for (gk, &wk) in g.iter_mut().zip(w) {
                *gk = (*gk - radial * wk / norm) / norm;
            }
        });
        Matrix::from_vec(self.classes(), d, grad).expect("non-empty head")
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::invalid(format!(
                "input dimension {d} does not match head dimension {}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// L2-normalizes every row of a feature matrix.
pub fn normalize_rows(features: &Matrix) -> Matrix {
    let d = features.cols();
    let mut out = features.as_slice().to_vec();
    par::fill_chunks(&mut out, d, |_, row| {
        l2_normalize_in_place(row, NORM_EPS);
    });
    Matrix::from_vec(features.rows(), d, out).expect("same shape")
}

/// Ordered concatenation of task heads.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedHead {
    heads: Vec<CosineHead>,
    /// `offsets[t]` is the first global id of head `t`; the last entry is the total.
    offsets: Vec<usize>,
}

pub fn concat(heads: Vec<CosineHead>) -> Result<UnifiedHead> {
    let dim = heads
        .first()
        .ok_or_else(|| Error::invalid("cannot concatenate zero heads"))?
        .dim();
    if let Some(h) = heads.iter().find(|h| h.dim() != dim) {
        return Err(Error::invalid(format!(
            "head for task {} has dimension {}, expected {dim}",
            h.task(),
            h.dim()
        )));
    }
    let mut offsets = Vec::with_capacity(heads.len() + 1);
    let mut acc = 0;
    offsets.push(0);
    for h in &heads {
        acc += h.classes();
        offsets.push(acc);
    }
    Ok(UnifiedHead { heads, offsets })
}

impl UnifiedHead {
    pub fn heads(&self) -> &[CosineHead] {
        &self.heads
    }

    pub fn into_heads(self) -> Vec<CosineHead> {
        self.heads
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn offset(&self, block: usize) -> usize {
        self.offsets[block]
    }

    pub fn total_classes(&self) -> usize {
        *self.offsets.last().expect("at least one head")
    }

    pub fn dim(&self) -> usize {
        self.heads[0].dim()
    }

    /// Appends a head as the next block.
    pub fn push(self, head: CosineHead) -> Result<UnifiedHead> {
        let mut heads = self.heads;
        heads.push(head);
        concat(heads)
    }

    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.heads[0].check_dim(z.len())?;
        let mut zn = z.to_vec();
        l2_normalize_in_place(&mut zn, NORM_EPS);
        let mut out = vec![0.0; self.total_classes()];
        self.logits_of_normalized(&zn, &mut out);
        Ok(out)
    }

    fn logits_of_normalized(&self, z_hat: &[f64], out: &mut [f64]) {
        for (h, w) in self.heads.iter().zip(self.offsets.windows(2)) {
            h.logits_of_normalized(z_hat, &mut out[w[0]..w[1]]);
        }
    }

    pub fn batch_logits(&self, features: &Matrix) -> Result<Matrix> {
        self.heads[0].check_dim(features.cols())?;
        let z_hat = normalize_rows(features);
        let c = self.total_classes();
        let mut out = vec![0.0; z_hat.rows() * c];
        par::fill_chunks(&mut out, c, |i, chunk| {
            self.logits_of_normalized(z_hat.row(i), chunk)
        });
        Matrix::from_vec(z_hat.rows(), c, out)
    }

    /// Global cluster id with the largest logit; ties go to the lowest id.
    pub fn predict(&self, z: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(z)?))
    }

    pub fn predict_batch(&self, features: &Matrix) -> Result<Vec<usize>> {
        let logits = self.batch_logits(features)?;
        Ok(logits.iter_rows().map(argmax).collect())
    }

    /// All blocks as one head, rows in global id order.
    pub fn stacked(&self) -> CosineHead {
        let parts: Vec<&Matrix> = self.heads.iter().map(|h| &h.weights).collect();
        CosineHead::new(Matrix::vstack(&parts).expect("shared dim"), usize::MAX)
    }

    /// Inverse of [`UnifiedHead::stacked`]: splits rows back into the same blocks.
    pub fn with_stacked_weights(&self, stacked: &CosineHead) -> Result<UnifiedHead> {
        if stacked.classes() != self.total_classes() || stacked.dim() != self.dim() {
            return Err(Error::invalid("stacked weights do not match unified head shape"));
        }
        let d = self.dim();
        let heads = self
            .heads
            .iter()
            .zip(self.offsets.windows(2))
            .map(|(h, w)| {
                let data = stacked.weights.as_slice()[w[0] * d..w[1] * d].to_vec();
                CosineHead::new(Matrix::from_vec(w[1] - w[0], d, data).expect("block"), h.task)
            })
            .collect();
        concat(heads)
    }

    /// Rounds all weights to f32 storage precision.
    pub fn quantize(&mut self) {
        for h in &mut self.heads {
            binio::quantize_f32(h.weights.as_mut_slice());
        }
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

const HEADS_MAGIC: &[u8; 4] = b"MSCH";
const HEADS_VERSION: u32 = 1;

/// Encodes heads as: magic "MSCH", version u32, block count u32, then per
/// block `task u32, rows u32, cols u32, rows×cols f32`, all little-endian.
pub fn encode_heads(heads: &[CosineHead]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(HEADS_MAGIC);
    out.extend_from_slice(&HEADS_VERSION.to_le_bytes());
    out.extend_from_slice(&(heads.len() as u32).to_le_bytes());
    for h in heads {
        out.extend_from_slice(&(h.task as u32).to_le_bytes());
        out.extend_from_slice(&(h.classes() as u32).to_le_bytes());
        out.extend_from_slice(&(h.dim() as u32).to_le_bytes());
        binio::put_f32s(&mut out, h.weights.as_slice());
    }
    out
}

pub fn decode_heads(bytes: &[u8]) -> Result<Vec<CosineHead>> {
    let mut cur = Cursor::new(bytes);
    if &cur.bytes::<4>("magic")? != HEADS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected \"MSCH\"".into(),
        });
    }
    let version_at = cur.offset();
    let version = cur.u32("version")?;
    if version != HEADS_VERSION {
        return Err(Error::Format {
            offset: version_at,
            message: format!("unsupported head file version {version}"),
        });
    }
    let n = cur.u32("block count")? as usize;
    let mut heads = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let at = cur.offset();
        let task = cur.u32("task index")? as usize;
        let rows = cur.u32("rows")? as usize;
        let cols = cur.u32("cols")? as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::Format {
                offset: at,
                message: format!("empty head block {rows}x{cols}"),
            });
        }
        let mut data = Vec::with_capacity(rows * cols);
        cur.f32s_into(rows * cols, &mut data, "head weights")?;
        heads.push(CosineHead::new(Matrix::from_vec(rows, cols, data)?, task));
    }
    cur.expect_end()?;
    Ok(heads)
}

pub fn write_heads(path: &Path, heads: &[CosineHead]) -> Result<()> {
    binio::write_atomic(path, &encode_heads(heads))
}

pub fn read_heads(path: &Path) -> Result<Vec<CosineHead>> {
    decode_heads(&binio::read_file(path)?)
}
