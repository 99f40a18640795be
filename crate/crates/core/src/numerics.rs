//! Dense double-precision primitives shared by the training and evaluation code.

use crate::error::{Error, Result};

/// Guard added under the square root of every L2 normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Row-major dense matrix with strictly positive dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::from_vec(rows, cols, vec![0.0; rows.saturating_mul(cols)])
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// Vertical concatenation; all parts must share the column count.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts
            .first()
            .ok_or_else(|| Error::invalid("vstack of zero matrices"))?
            .cols;
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::invalid("vstack column mismatch"));
        }
        let data: Vec<f64> = parts.iter().flat_map(|m| m.data.iter().copied()).collect();
        Matrix::from_vec(data.len() / cols, cols, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `v / sqrt(v·v + eps)`.
pub fn l2_normalize(v: &[f64], eps: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("cannot normalize an empty vector"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let mut out = v.to_vec();
    l2_normalize_in_place(&mut out, eps);
    Ok(out)
}

/// In-place variant; returns the divisor `sqrt(v·v + eps)`.
pub(crate) fn l2_normalize_in_place(v: &mut [f64], eps: f64) -> f64 {
    let norm = (dot(v, v) + eps).sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }
    norm
}

/// Temperature softmax with max subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, temperature, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l - max) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp_scaled(logits: &[f64], temperature: f64) -> (f64, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| ((l - max) / temperature).exp()).sum();
    (max / temperature, sum.ln())
}

/// `−Σ_j target_j · log softmax(logits/τ)_j`.
pub fn cross_entropy(logits: &[f64], soft_target: &[f64], temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    if logits.len() != soft_target.len() || logits.is_empty() {
        return Err(Error::invalid(format!(
            "cross_entropy dimension mismatch: {} logits vs {} targets",
            logits.len(),
            soft_target.len()
        )));
    }
    Ok(cross_entropy_unchecked(logits, soft_target, temperature))
}

pub(crate) fn cross_entropy_unchecked(logits: &[f64], target: &[f64], temperature: f64) -> f64 {
    let (shift, lse) = log_sum_exp_scaled(logits, temperature);
    logits
        .iter()
        .zip(target)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&l, &t)| -t * (l / temperature - shift - lse))
        .sum()
}

/// Cross-entropy against a hard label.
pub(crate) fn cross_entropy_hard(logits: &[f64], label: usize, temperature: f64) -> f64 {
    let (shift, lse) = log_sum_exp_scaled(logits, temperature);
    -(logits[label] / temperature - shift - lse)
}

/// Gradient of the soft cross-entropy w.r.t. the raw logits, scaled by `weight`:
/// `weight · (softmax(l/τ) − target) / τ`.
pub(crate) fn cross_entropy_grad_into(
    logits: &[f64],
    target: &[f64],
    temperature: f64,
    weight: f64,
    out: &mut [f64],
) {
    softmax_into(logits, temperature, out);
    for (o, &t) in out.iter_mut().zip(target) {
        *o = weight * (*o - t) / temperature;
    }
}

pub(crate) fn cross_entropy_hard_grad_into(
    logits: &[f64],
    label: usize,
    temperature: f64,
    weight: f64,
    out: &mut [f64],
) {
    softmax_into(logits, temperature, out);
    out[label] -= 1.0;
    for o in out.iter_mut() {
        *o *= weight / temperature;
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )))
    }
}

/// Momentum SGD state with weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
}

impl OptimizerState {
    pub fn new(n_params: usize, momentum: f64, weight_decay: f64, base_lr: f64) -> Self {
        OptimizerState {
            velocity: vec![0.0; n_params],
            momentum,
            weight_decay,
            base_lr,
        }
    }
}

/// `v ← μ·v + (g + wd·p); p ← p − lr·v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::invalid(format!(
            "sgd shape mismatch: params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        *v = state.momentum * *v + (g + state.weight_decay * *p);
        *p -= lr * *v;
    }
    Ok(())
}

/// Cosine annealing from `base` at step 0 to zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub total: usize,
    pub step: usize,
}

impl LrSchedule {
    pub fn new(base: f64, total: usize) -> Self {
        LrSchedule {
            base,
            total,
            step: 0,
        }
    }

    /// Current rate, then advance one step.
    pub fn next_rate(&mut self) -> Result<f64> {
        let lr = cosine_lr(self)?;
        self.step += 1;
        Ok(lr)
    }
}

pub fn cosine_lr(schedule: &LrSchedule) -> Result<f64> {
    if schedule.step > schedule.total {
        return Err(Error::invalid(format!(
            "lr schedule step {} beyond total {}",
            schedule.step, schedule.total
        )));
    }
    if schedule.total == 0 {
        return Ok(schedule.base);
    }
    let frac = schedule.step as f64 / schedule.total as f64;
    Ok(schedule.base * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn normalize_pythagorean() {
        let out = l2_normalize(&[3.0, 4.0], NORM_EPS).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-12);
        assert!((out[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn normalize_zero_vector() {
        let out = l2_normalize(&[0.0; 5], NORM_EPS).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
        assert!(l2_normalize(&[], NORM_EPS).is_err());
    }

    #[test]
    fn normalize_random_768() {
        let mut rng = crate::rng::seeded(11);
        let v: Vec<f64> = (0..768).map(|_| rng.random_range(-3.0..3.0)).collect();
        let out = l2_normalize(&v, NORM_EPS).unwrap();
        let norm = dot(&out, &out).sqrt();
        assert!((1.0 - 1e-6..=1.0).contains(&norm), "{norm}");
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&[0.0, 0.0, 0.0], 0.1).unwrap();
        assert!(u.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));

        let e = std::f64::consts::E;
        let p = softmax(&[1.0, 0.0], 1.0).unwrap();
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-15);

        // 60-digit reference from tests/oracles/gen_oracles.py
        let p = softmax(&[1.0, 0.0], 0.1).unwrap();
        assert!((p[0] - 0.999_954_602_131_297_6).abs() < 1e-15);
        assert!((p[1] - 4.539_786_870_243_439_4e-5).abs() < 1e-17);

        assert!(softmax(&[1.0], 0.0).is_err());
        assert!(softmax(&[1.0], -1.0).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let ce = cross_entropy(&[10.0, -10.0], &[1.0, 0.0], 1.0).unwrap();
        assert!((ce - 2.061_153_6e-9).abs() < 1e-15, "{ce}");

        let k = 7;
        let ce = cross_entropy(&vec![0.4; k], &vec![1.0 / k as f64; k], 0.1).unwrap();
        assert!((ce - (k as f64).ln()).abs() < 1e-12);

        // 60-digit reference from tests/oracles/gen_oracles.py
        let ce = cross_entropy(
            &[0.3, -1.2, 2.5, 0.0, -0.7],
            &[0.1, 0.2, 0.4, 0.25, 0.05],
            0.5,
        )
        .unwrap();
        assert!((ce - 3.511_064_670_718_035_8).abs() < 1e-10, "{ce}");

        assert!(cross_entropy(&[1.0, 2.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        let logits = [0.3, -1.2, 2.5, 0.0, -0.7];
        let target = [0.1, 0.2, 0.4, 0.25, 0.05];
        let mut g = [0.0; 5];
        cross_entropy_grad_into(&logits, &target, 0.5, 1.0, &mut g);
        let h = 1e-6;
        for j in 0..5 {
            let mut up = logits;
            let mut dn = logits;
            up[j] += h;
            dn[j] -= h;
            let fd = (cross_entropy_unchecked(&up, &target, 0.5)
                - cross_entropy_unchecked(&dn, &target, 0.5))
                / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-7);
        }
        let mut gh = [0.0; 5];
        cross_entropy_hard_grad_into(&logits, 2, 0.5, 1.0, &mut gh);
        let one_hot = [0.0, 0.0, 1.0, 0.0, 0.0];
        cross_entropy_grad_into(&logits, &one_hot, 0.5, 1.0, &mut g);
        for j in 0..5 {
            assert!((gh[j] - g[j]).abs() < 1e-15);
        }
        assert!(
            (cross_entropy_hard(&logits, 2, 0.5) - cross_entropy_unchecked(&logits, &one_hot, 0.5))
                .abs()
                < 1e-14
        );
    }

    #[test]
    fn sgd_plain_descent() {
        let mut p = vec![1.0, 2.0];
        let mut st = OptimizerState::new(2, 0.0, 0.0, 1.0);
        sgd_step(&mut p, &[0.5, -0.25], &mut st, 1.0).unwrap();
        assert_eq!(p, vec![0.5, 2.25]);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let (p0, g1, g2, mu, lr) = (1.0, 0.3, -0.2, 0.9, 0.1);
        let mut p = vec![p0];
        let mut st = OptimizerState::new(1, mu, 0.0, lr);
        sgd_step(&mut p, &[g1], &mut st, lr).unwrap();
        sgd_step(&mut p, &[g2], &mut st, lr).unwrap();
        let v1 = g1;
        let v2 = mu * v1 + g2;
        let expected = p0 - lr * v1 - lr * v2;
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn sgd_pure_decay() {
        let mut p = vec![2.0, -4.0];
        let mut st = OptimizerState::new(2, 0.9, 1e-4, 0.1);
        sgd_step(&mut p, &[0.0, 0.0], &mut st, 0.1).unwrap();
        assert!((p[0] - (2.0 - 0.1 * 1e-4 * 2.0)).abs() < 1e-15);
        assert!((p[1] - (-4.0 + 0.1 * 1e-4 * 4.0)).abs() < 1e-15);
        assert!(sgd_step(&mut p, &[0.0], &mut st, 0.1).is_err());
    }

    #[test]
    fn cosine_schedule_points() {
        let at = |step| {
            cosine_lr(&LrSchedule {
                base: 0.1,
                total: 100,
                step,
            })
            .unwrap()
        };
        assert!((at(0) - 0.1).abs() < 1e-15);
        assert!((at(50) - 0.05).abs() < 1e-15);
        assert!(at(100).abs() < 1e-15);
        assert!(cosine_lr(&LrSchedule {
            base: 0.1,
            total: 100,
            step: 101
        })
        .is_err());
    }

    #[test]
    fn transpose_and_vstack() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let t = m.transpose();
        assert_eq!(t.rows(), 3);
        assert_eq!(t.row(2), &[3.0, 6.0]);
        let s = Matrix::vstack(&[&m, &m]).unwrap();
        assert_eq!(s.rows(), 4);
        assert_eq!(s.row(3), m.row(1));
        assert!(Matrix::zeros(0, 3).is_err());
    }

    proptest! {
        #[test]
        fn normalize_idempotent(v in proptest::collection::vec(-10.0f64..10.0, 1..64)) {
            prop_assume!(dot(&v, &v).sqrt() >= 1e-3);
            let once = l2_normalize(&v, NORM_EPS).unwrap();
            let twice = l2_normalize(&once, NORM_EPS).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn softmax_shift_invariant(
            v in proptest::collection::vec(-5.0f64..5.0, 1..16),
            c in -50.0f64..50.0,
            temp in 0.05f64..4.0,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = softmax(&v, temp).unwrap();
            let b = softmax(&shifted, temp).unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(*x > 0.0);
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn cosine_lr_monotone(total in 1usize..500, base in 0.001f64..1.0) {
            let mut prev = f64::INFINITY;
            for step in 0..=total {
                let lr = cosine_lr(&LrSchedule { base, total, step }).unwrap();
                prop_assert!(lr <= prev);
                prop_assert!(lr <= base && lr >= 0.0);
                prev = lr;
            }
        }
    }
}
