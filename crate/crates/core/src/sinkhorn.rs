//! Sinkhorn-Knopp soft assignment codes for a minibatch of logits.
//!
//! The logits matrix `B×C` is exponentiated at temperature `ε` and transposed
//! to `C×B`. Each round first scales every cluster row to mass `1/C`, then
//! every sample column to mass `1/B`. After the last round the matrix is
//! transposed back and each sample row is scaled to sum to one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub n_iters: usize,
    pub epsilon: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            n_iters: 3,
            epsilon: 0.05,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::invalid("sinkhorn n_iters must be at least 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "sinkhorn epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Row-stochastic `B×C` soft targets.
pub fn sinkhorn_codes(logits: &Matrix, cfg: &SinkhornConfig) -> Result<Matrix> {
    cfg.validate()?;
    if logits.cols() < 2 {
        return Err(Error::invalid(format!(
            "sinkhorn needs at least 2 classes, got {}",
            logits.cols()
        )));
    }
    if !logits.is_finite() {
        return Err(Error::invalid("sinkhorn logits must be finite"));
    }
    let b = logits.rows();
    let c = logits.cols();
    let max = logits
        .as_slice()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);

    // q[j * b + i]: cluster j, sample i
    let mut q = vec![0.0; b * c];
    for i in 0..b {
        for (j, &l) in logits.row(i).iter().enumerate() {
            q[j * b + i] = ((l - max) / cfg.epsilon).exp();
        }
    }
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|x| *x /= total);

    let mut col_sums = vec![0.0; b];
    for _ in 0..cfg.n_iters {
        for row in q.chunks_exact_mut(b) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|x| *x = *x / s / c as f64);
            }
        }
        col_sums.iter_mut().for_each(|s| *s = 0.0);
        for row in q.chunks_exact(b) {
            for (s, &x) in col_sums.iter_mut().zip(row) {
                *s += x;
            }
        }
        for row in q.chunks_exact_mut(b) {
            for (x, &s) in row.iter_mut().zip(&col_sums) {
                if s > 0.0 {
                    *x = *x / s / b as f64;
                }
            }
        }
    }

    let mut out = vec![0.0; b * c];
    for i in 0..b {
        let dst = &mut out[i * c..(i + 1) * c];
        for (j, d) in dst.iter_mut().enumerate() {
            *d = q[j * b + i] * b as f64;
        }
        let s: f64 = dst.iter().sum();
        if s > 0.0 {
            dst.iter_mut().for_each(|x| *x /= s);
        } else {
            dst.iter_mut().for_each(|x| *x = 1.0 / c as f64);
        }
    }
    Matrix::from_vec(b, c, out)
}
