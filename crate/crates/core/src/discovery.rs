//! Per-task cluster discovery by swapped prediction.
//!
//! Every minibatch draws two views per sample, scores both with the task head,
//! turns each view's logits into Sinkhorn codes, and trains each view to
//! predict the codes of the other. Only the head learns; embeddings are read
//! through shared references and never written.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classifier::{init_head, normalize_rows, CosineHead};
use crate::data::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::numerics::{
    cross_entropy_grad_into, cross_entropy_unchecked, sgd_step, LrSchedule, Matrix, OptimizerState,
};
use crate::par;
use crate::rng::{self, Rng};
use crate::sinkhorn::{sinkhorn_codes, SinkhornConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub sinkhorn: SinkhornConfig,
    pub seed: u64,
    /// Relative std of the Gaussian jitter used when a sample has one view.
    pub jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 256,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            temperature: 0.1,
            sinkhorn: SinkhornConfig::default(),
            seed: 0,
            jitter: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        for (name, v) in [("lr", self.lr), ("temperature", self.temperature)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("jitter", self.jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        self.sinkhorn.validate()
    }
}

/// Two embeddings of one underlying sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// Picks two distinct stored views, or jitters the only one with
/// `N(0, (σ‖z‖/√D)²)` noise per dimension.
pub fn make_views(views: &[f64], dim: usize, jitter: f64, rng: &mut Rng) -> Result<ViewPair> {
    if dim == 0 || views.is_empty() || views.len() % dim != 0 {
        return Err(Error::invalid("sample has no stored views"));
    }
    let v = views.len() / dim;
    if v >= 2 {
        let a = rng.random_range(0..v);
        let mut b = rng.random_range(0..v - 1);
        if b >= a {
            b += 1;
        }
        return Ok(ViewPair {
            first: views[a * dim..(a + 1) * dim].to_vec(),
            second: views[b * dim..(b + 1) * dim].to_vec(),
        });
    }
    let z = &views[..dim];
    if jitter == 0.0 {
        return Ok(ViewPair {
            first: z.to_vec(),
            second: z.to_vec(),
        });
    }
    let std = jitter * z.iter().map(|x| x * x).sum::<f64>().sqrt() / (dim as f64).sqrt();
    let mut noisy = || -> Vec<f64> {
        z.iter()
            .map(|&x| {
                let n: f64 = StandardNormal.sample(rng);
                x + std * n
            })
            .collect()
    };
    let first = noisy();
    let second = noisy();
    Ok(ViewPair { first, second })
}

/// Minibatch of view pairs as two `B×D` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    pub first: Matrix,
    pub second: Matrix,
}

pub fn make_view_batch(ds: &EmbeddingDataset, indices: &[usize], jitter: f64, rng: &mut Rng) -> Result<ViewBatch> {
    let d = ds.dim();
    let mut first = Vec::with_capacity(indices.len() * d);
    let mut second = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        let start = i * ds.views() * d;
        let pair = make_views(&ds.raw_features()[start..start + ds.views() * d], d, jitter, rng)?;
        first.extend_from_slice(&pair.first);
        second.extend_from_slice(&pair.second);
    }
    Ok(ViewBatch {
        first: Matrix::from_vec(indices.len(), d, first)?,
        second: Matrix::from_vec(indices.len(), d, second)?,
    })
}

/// Loss value and gradient w.r.t. the head's raw weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: Matrix,
}

/// Sinkhorn codes for both views of a batch, computed from raw logits.
pub fn swapped_codes(head: &CosineHead, batch: &ViewBatch, sinkhorn: &SinkhornConfig) -> Result<(Matrix, Matrix)> {
    let l1 = head.batch_logits(&batch.first)?;
    let l2 = head.batch_logits(&batch.second)?;
    Ok((sinkhorn_codes(&l1, sinkhorn)?, sinkhorn_codes(&l2, sinkhorn)?))
}

/// `CE(l₁/τ, y₂) + CE(l₂/τ, y₁)`, each averaged over the batch, with the
/// codes computed here and treated as constants.
pub fn swapped_loss(head: &CosineHead, batch: &ViewBatch, cfg: &TrainConfig) -> Result<LossAndGrad> {
    let (y1, y2) = swapped_codes(head, batch, &cfg.sinkhorn)?;
    swapped_loss_with_codes(head, batch, &y1, &y2, cfg.temperature)
}

/// The swapped loss for fixed codes `y1` (from view 1) and `y2` (from view 2).
pub fn swapped_loss_with_codes(
    head: &CosineHead,
    batch: &ViewBatch,
    y1: &Matrix,
    y2: &Matrix,
    temperature: f64,
) -> Result<LossAndGrad> {
    let b = batch.first.rows();
    if batch.second.rows() != b || y1.rows() != b || y2.rows() != b {
        return Err(Error::invalid("view and code batches differ in size"));
    }
    if y1.cols() != head.classes() || y2.cols() != head.classes() {
        return Err(Error::invalid("codes do not match head width"));
    }
    if batch.first.cols() != head.dim() || batch.second.cols() != head.dim() {
        return Err(Error::invalid("views do not match head dimension"));
    }
    // stack both views: rows 0..B are view 1 (target y2), rows B..2B view 2 (target y1)
    let z_hat = normalize_rows(&Matrix::vstack(&[&batch.first, &batch.second])?);
    let targets = Matrix::vstack(&[y2, y1])?;
    soft_target_loss(head, &z_hat, &targets, temperature, 1.0 / b as f64)
}

/// `weight · Σ_i CE(l_i/τ, target_i)` over normalized inputs, plus its gradient.
pub(crate) fn soft_target_loss(
    head: &CosineHead,
    z_hat: &Matrix,
    targets: &Matrix,
    temperature: f64,
    weight: f64,
) -> Result<LossAndGrad> {
    let logits = head.batch_logits_normalized(z_hat);
    let c = head.classes();
    let losses = par::map_indices(z_hat.rows(), |i| {
        cross_entropy_unchecked(logits.row(i), targets.row(i), temperature)
    });
    let mut dl = vec![0.0; z_hat.rows() * c];
    par::fill_chunks(&mut dl, c, |i, out| {
        cross_entropy_grad_into(logits.row(i), targets.row(i), temperature, weight, out)
    });
    let dl = Matrix::from_vec(z_hat.rows(), c, dl)?;
    Ok(LossAndGrad {
        loss: weight * losses.iter().sum::<f64>(),
        grad: head.weight_gradient(z_hat, &logits, &dl),
    })
}

/// Mean loss of every epoch, in order.
pub type EpochLosses = Vec<f64>;

/// Trains `head` on `ds` with the swapped-prediction objective, starting from
/// the given weights.
pub fn train_swapped(mut head: CosineHead, ds: &EmbeddingDataset, cfg: &TrainConfig, stream: &str) -> Result<(CosineHead, EpochLosses)> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if ds.dim() != head.dim() {
        return Err(Error::invalid(format!(
            "dataset dimension {} does not match head dimension {}",
            ds.dim(),
            head.dim()
        )));
    }
    let n = ds.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut sched = LrSchedule::new(cfg.lr, cfg.epochs * steps_per_epoch);
    let mut opt = OptimizerState::new(head.classes() * head.dim(), cfg.momentum, cfg.weight_decay, cfg.lr);
    let mut rng = rng::derived(cfg.seed, stream);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = make_view_batch(ds, chunk, cfg.jitter, &mut rng)?;
            head.renormalize_weights();
            let step = swapped_loss(&head, &batch, cfg)?;
            let lr = sched.next_rate()?;
            sgd_step(head.weights_mut(), step.grad.as_slice(), &mut opt, lr)?;
            total += step.loss;
        }
        epoch_losses.push(total / steps_per_epoch as f64);
    }
    Ok((head, epoch_losses))
}

/// Discovers `classes` clusters in `ds` with a freshly initialized head.
pub fn discover_task(ds: &EmbeddingDataset, classes: usize, cfg: &TrainConfig) -> Result<CosineHead> {
    discover_task_logged(ds, classes, cfg).map(|(h, _)| h)
}

pub fn discover_task_logged(ds: &EmbeddingDataset, classes: usize, cfg: &TrainConfig) -> Result<(CosineHead, EpochLosses)> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::invalid("cannot discover clusters in an empty dataset"));
    }
    if classes > ds.len() {
        return Err(Error::invalid(format!(
            "cannot populate {classes} clusters from {} samples",
            ds.len()
        )));
    }
    let head = init_head(classes, ds.dim(), cfg.seed)?;
    train_swapped(head, ds, cfg, "discovery")
}
