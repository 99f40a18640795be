//! Gaussian prototype memory and replay fine-tuning of the unified head.
//!
//! After a task is discovered, every pseudo-class of its head is summarized by
//! the mean and diagonal variance of the raw embeddings assigned to it. Later
//! steps sample past-class features from those Gaussians and fine-tune the
//! whole concatenated head on replayed features (hard prototype labels)
//! together with current-task features pseudo-labelled by the current head.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::binio::{self, Cursor};
use crate::classifier::{argmax, normalize_rows, CosineHead, UnifiedHead};
use crate::data::EmbeddingDataset;
use crate::discovery::{make_view_batch, LossAndGrad, TrainConfig, EpochLosses};
use crate::error::{Error, Result};
use crate::numerics::{
    cross_entropy_hard, cross_entropy_hard_grad_into, sgd_step, LrSchedule, Matrix, OptimizerState,
};
use crate::par;
use crate::rng::{self, Rng};

/// Lower bound on every per-dimension prototype variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    /// Global pseudo-class id, i.e. the unified-head column it trains.
    pub id: usize,
    pub task: usize,
    pub count: u64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Append-only list of prototypes from all completed tasks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrototypeMemory {
    prototypes: Vec<ClassPrototype>,
}

impl PrototypeMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn prototypes(&self) -> &[ClassPrototype] {
        &self.prototypes
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.prototypes.first().map(|p| p.mean.len())
    }

    /// Adds the prototypes of a newly completed task.
    pub fn extend(&mut self, protos: Vec<ClassPrototype>) -> Result<()> {
        if let (Some(d), Some(p)) = (self.dim(), protos.first()) {
            if p.mean.len() != d {
                return Err(Error::invalid("prototype dimension differs from memory"));
            }
        }
        if let Some(last) = self.prototypes.last() {
            if protos.iter().any(|p| p.task <= last.task) {
                return Err(Error::InvalidState(
                    "prototypes of a task are stored once, in task order".into(),
                ));
            }
        }
        self.prototypes.extend(protos);
        Ok(())
    }

    /// Rounds means to f32 and variances up to the next f32, so the floor survives.
    pub fn quantize(&mut self) {
        for p in &mut self.prototypes {
            binio::quantize_f32(&mut p.mean);
            for v in &mut p.variance {
                let mut q = *v as f32;
                if f64::from(q) < *v {
                    q = q.next_up();
                }
                *v = f64::from(q);
            }
        }
    }
}

/// Per pseudo-class mean and population variance of raw first-view
/// embeddings, labelled by `head`'s argmax and offset into the global id space.
/// Pseudo-classes that receive no sample produce no prototype.
pub fn compute_prototypes(
    ds: &EmbeddingDataset,
    head: &CosineHead,
    task: usize,
    offset: usize,
) -> Result<Vec<ClassPrototype>> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot compute prototypes of an empty dataset"));
    }
    let feats = ds.view_matrix(0)?;
    let logits = head.batch_logits(&feats)?;
    let d = ds.dim();
    let c = head.classes();
    let mut sum = vec![0.0; c * d];
    let mut count = vec![0u64; c];
    let labels: Vec<usize> = logits.iter_rows().map(argmax).collect();
    for (i, &k) in labels.iter().enumerate() {
        count[k] += 1;
        for (s, x) in sum[k * d..(k + 1) * d].iter_mut().zip(feats.row(i)) {
            *s += x;
        }
    }
    let means: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            let n = count[k].max(1) as f64;
            sum[k * d..(k + 1) * d].iter().map(|s| s / n).collect()
        })
        .collect();
    let mut sq = vec![0.0; c * d];
    for (i, &k) in labels.iter().enumerate() {
        for ((s, x), m) in sq[k * d..(k + 1) * d].iter_mut().zip(feats.row(i)).zip(&means[k]) {
            *s += (x - m) * (x - m);
        }
    }
    Ok((0..c)
        .filter(|&k| count[k] > 0)
        .map(|k| ClassPrototype {
            id: offset + k,
            task,
            count: count[k],
            variance: sq[k * d..(k + 1) * d]
                .iter()
                .map(|s| (s / count[k] as f64).max(VARIANCE_FLOOR))
                .collect(),
            mean: means[k].clone(),
        })
        .collect())
}

/// `n` features drawn from uniformly chosen prototypes, with their global ids.
pub fn replay_batch(memory: &PrototypeMemory, n: usize, rng: &mut Rng) -> Result<(Matrix, Vec<usize>)> {
    if memory.is_empty() {
        return Err(Error::InvalidState("replay from an empty prototype memory".into()));
    }
    if n == 0 {
        return Err(Error::invalid("replay batch size must be positive"));
    }
    let d = memory.dim().expect("non-empty");
    let mut feats = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let p = &memory.prototypes[rng.random_range(0..memory.len())];
        labels.push(p.id);
        for (&m, &v) in p.mean.iter().zip(&p.variance) {
            let e: f64 = StandardNormal.sample(rng);
            feats.push(m + v.sqrt() * e);
        }
    }
    Ok((Matrix::from_vec(n, d, feats)?, labels))
}

/// `mean_past CE(h(z_past)/τ, y_past) + mean_current CE(h(z_cur)/τ, y_cur)`
/// for hard labels, with the gradient w.r.t. `head`'s raw weights.
pub fn past_current_loss(
    head: &CosineHead,
    past: (&Matrix, &[usize]),
    current: (&Matrix, &[usize]),
    temperature: f64,
) -> Result<LossAndGrad> {
    let (zp, yp) = past;
    let (zc, yc) = current;
    if zp.rows() != yp.len() || zc.rows() != yc.len() {
        return Err(Error::invalid("feature and label counts differ"));
    }
    if yp.iter().chain(yc).any(|&y| y >= head.classes()) {
        return Err(Error::invalid("label outside the unified head"));
    }
    let z_hat = normalize_rows(&Matrix::vstack(&[zp, zc])?);
    let labels: Vec<usize> = yp.iter().chain(yc).copied().collect();
    let n_past = zp.rows();
    let weight = |i: usize| {
        if i < n_past {
            1.0 / n_past as f64
        } else {
            1.0 / zc.rows() as f64
        }
    };
    let logits = head.batch_logits_normalized(&z_hat);
    let c = head.classes();
    let losses = par::map_indices(z_hat.rows(), |i| {
        weight(i) * cross_entropy_hard(logits.row(i), labels[i], temperature)
    });
    let mut dl = vec![0.0; z_hat.rows() * c];
    par::fill_chunks(&mut dl, c, |i, out| {
        cross_entropy_hard_grad_into(logits.row(i), labels[i], temperature, weight(i), out)
    });
    let dl = Matrix::from_vec(z_hat.rows(), c, dl)?;
    Ok(LossAndGrad {
        loss: losses.iter().sum(),
        grad: head.weight_gradient(&z_hat, &logits, &dl),
    })
}

/// Fine-tunes every block of `unified` on replayed past features plus the
/// current data pseudo-labelled by `current_head` (the last block's origin).
pub fn ktrfr_finetune(
    unified: &UnifiedHead,
    current: &EmbeddingDataset,
    current_head: &CosineHead,
    memory: &PrototypeMemory,
    cfg: &TrainConfig,
) -> Result<(UnifiedHead, EpochLosses)> {
    cfg.validate()?;
    if memory.is_empty() {
        return Err(Error::InvalidState(
            "replay fine-tuning needs prototypes from earlier tasks".into(),
        ));
    }
    if current.is_empty() {
        return Err(Error::invalid("current task has no samples"));
    }
    let blocks = unified.heads().len();
    let offset = unified.offset(blocks - 1);
    if unified.total_classes() - offset != current_head.classes() {
        return Err(Error::invalid(
            "the unified head's last block must be the current task's head",
        ));
    }
    if memory.prototypes().iter().any(|p| p.id >= offset) {
        return Err(Error::InvalidState("prototype ids must precede the current block".into()));
    }
    if memory.dim() != Some(unified.dim()) || current.dim() != unified.dim() {
        return Err(Error::invalid("memory, data and head dimensions differ"));
    }

    let mut stacked = unified.stacked();
    let n = current.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut sched = LrSchedule::new(cfg.lr, cfg.epochs * steps_per_epoch);
    let mut opt = OptimizerState::new(stacked.classes() * stacked.dim(), cfg.momentum, cfg.weight_decay, cfg.lr);
    let mut rng = rng::derived(cfg.seed, "ktrfr");
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let views = make_view_batch(current, chunk, cfg.jitter, &mut rng)?;
            stacked.renormalize_weights();
            let (z_past, y_past) = replay_batch(memory, chunk.len(), &mut rng)?;
            let z_cur = Matrix::vstack(&[&views.first, &views.second])?;
            let y_cur: Vec<usize> = current_head
                .batch_logits(&z_cur)?
                .iter_rows()
                .map(|l| argmax(l) + offset)
                .collect();
            let step = past_current_loss(&stacked, (&z_past, &y_past), (&z_cur, &y_cur), cfg.temperature)?;
            let lr = sched.next_rate()?;
            sgd_step(stacked.weights_mut(), step.grad.as_slice(), &mut opt, lr)?;
            total += step.loss;
        }
        epoch_losses.push(total / steps_per_epoch as f64);
    }
    Ok((unified.with_stacked_weights(&stacked)?, epoch_losses))
}

/// Layout, little-endian: count u64, dim u32, then per prototype
/// `id i32, task i32, count u64, mean dim×f32, variance dim×f32`.
pub fn encode_memory(memory: &PrototypeMemory) -> Vec<u8> {
    let d = memory.dim().unwrap_or(0);
    let mut out = Vec::new();
    out.extend_from_slice(&(memory.len() as u64).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for p in &memory.prototypes {
        out.extend_from_slice(&(p.id as i32).to_le_bytes());
        out.extend_from_slice(&(p.task as i32).to_le_bytes());
        out.extend_from_slice(&p.count.to_le_bytes());
        binio::put_f32s(&mut out, &p.mean);
        binio::put_f32s(&mut out, &p.variance);
    }
    out
}

pub fn decode_memory(bytes: &[u8]) -> Result<PrototypeMemory> {
    let mut cur = Cursor::new(bytes);
    let n = cur.u64("prototype count")?;
    let d = cur.u32("dim")? as usize;
    let record = 16 + 8 * d as u64;
    let expected = n.checked_mul(record).and_then(|b| b.checked_add(12));
    if expected != Some(bytes.len() as u64) {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "expected {} bytes for {n} prototypes of dim {d}, found {}",
                expected.map_or_else(|| "overflowing".to_string(), |e| e.to_string()),
                bytes.len()
            ),
        });
    }
    if n > 0 && d == 0 {
        return Err(Error::Format { offset: 8, message: "prototype dim is zero".into() });
    }
    let mut protos = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let at = cur.offset();
        let id = cur.i32("id")?;
        let task = cur.i32("task")?;
        let count = cur.u64("member count")?;
        if id < 0 || task < 0 || count == 0 {
            return Err(Error::Format {
                offset: at,
                message: format!("invalid prototype header id={id} task={task} count={count}"),
            });
        }
        let mut mean = Vec::with_capacity(d);
        cur.f32s_into(d, &mut mean, "prototype mean")?;
        let var_at = cur.offset();
        let mut variance = Vec::with_capacity(d);
        cur.f32s_into(d, &mut variance, "prototype variance")?;
        if variance.iter().any(|&v| v < VARIANCE_FLOOR) {
            return Err(Error::Format {
                offset: var_at,
                message: "prototype variance below floor".into(),
            });
        }
        protos.push(ClassPrototype {
            id: id as usize,
            task: task as usize,
            count,
            mean,
            variance,
        });
    }
    cur.expect_end()?;
    Ok(PrototypeMemory { prototypes: protos })
}

pub fn write_memory(path: &Path, memory: &PrototypeMemory) -> Result<()> {
    binio::write_atomic(path, &encode_memory(memory))
}

pub fn read_memory(path: &Path) -> Result<PrototypeMemory> {
    decode_memory(&binio::read_file(path)?)
}
