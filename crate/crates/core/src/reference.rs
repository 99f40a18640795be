//! Reference comparators: k-means++ on pooled embeddings and joint training of
//! the concatenated head on all data seen so far.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::classifier::UnifiedHead;
use crate::data::EmbeddingDataset;
use crate::discovery::{train_swapped, EpochLosses, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::Predictor;
use crate::numerics::Matrix;
use crate::par;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KmeansConfig {
    /// Number of clusters. The orchestrator sets it to the classes seen so far.
    pub k: usize,
    pub max_iters: usize,
    pub n_init: usize,
    pub seed: u64,
    /// Stop once the largest center displacement falls below this.
    pub tol: f64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig { k: 2, max_iters: 300, n_init: 1, seed: 0, tol: 1e-6 }
    }
}

impl KmeansConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid(format!("k-means needs k >= 2, got {}", self.k)));
        }
        if self.max_iters == 0 || self.n_init == 0 {
            return Err(Error::invalid("max_iters and n_init must be at least 1"));
        }
        if !(self.tol >= 0.0 && self.tol.is_finite()) {
            return Err(Error::invalid("k-means tol must be non-negative"));
        }
        Ok(())
    }
}

/// Cluster centers; predicts the nearest one.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub centers: Matrix,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Centroids {
    /// Nearest center and its squared distance, lowest index on ties.
    fn nearest(&self, z: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (j, c) in self.centers.iter_rows().enumerate() {
            let d = sq_dist(z, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    pub fn assign(&self, features: &Matrix) -> Result<Vec<usize>> {
        if features.cols() != self.centers.cols() {
            return Err(Error::invalid("feature dimension differs from centers"));
        }
        Ok(par::map_indices(features.rows(), |i| self.nearest(features.row(i)).0))
    }

    /// Sum of squared distances to the nearest center.
    pub fn objective(&self, features: &Matrix) -> f64 {
        par::map_indices(features.rows(), |i| self.nearest(features.row(i)).1)
            .iter()
            .sum()
    }
}

impl Predictor for Centroids {
    fn n_clusters(&self) -> usize {
        self.centers.rows()
    }

    fn predict_batch(&self, features: &Matrix) -> Result<Vec<usize>> {
        self.assign(features)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub ids: Vec<usize>,
    pub centroids: Centroids,
    pub iterations: usize,
    /// Objective after seeding, then after every Lloyd update.
    pub objective_trace: Vec<f64>,
}

fn plus_plus_seeding(x: &Matrix, k: usize, rng: &mut rng::Rng) -> Matrix {
    let n = x.rows();
    let mut centers: Vec<usize> = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = par::map_indices(n, |i| sq_dist(x.row(i), x.row(centers[0])));
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(next);
        let c = x.row(next);
        let fresh = par::map_indices(n, |i| sq_dist(x.row(i), c));
        for (d, f) in d2.iter_mut().zip(fresh) {
            *d = d.min(f);
        }
    }
    let rows: Vec<Vec<f64>> = centers.iter().map(|&i| x.row(i).to_vec()).collect();
    Matrix::from_rows(&rows).expect("k >= 1 rows of equal width")
}

fn lloyd(x: &Matrix, mut centroids: Centroids, cfg: &KmeansConfig) -> KmeansResult {
    let (n, d, k) = (x.rows(), x.cols(), cfg.k);
    let mut trace = vec![centroids.objective(x)];
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let nearest = par::map_indices(n, |i| centroids.nearest(x.row(i)));
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &(j, _)) in nearest.iter().enumerate() {
            counts[j] += 1;
            for (s, v) in sums[j * d..(j + 1) * d].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        // Empty clusters move to the points farthest from their centers,
        // one distinct point per empty cluster.
        let mut by_distance: Vec<usize> = (0..n).collect();
        by_distance.sort_by(|&a, &b| nearest[b].1.total_cmp(&nearest[a].1).then(a.cmp(&b)));
        let mut far = by_distance.into_iter();
        let mut shift: f64 = 0.0;
        let mut next = Matrix::zeros(k, d).expect("positive shape");
        for j in 0..k {
            let row = next.row_mut(j);
            if counts[j] > 0 {
                for (r, s) in row.iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                    *r = s / counts[j] as f64;
                }
            } else {
                let p = far.next().unwrap_or(0);
                row.copy_from_slice(x.row(p));
            }
            shift = shift.max(sq_dist(row, centroids.centers.row(j)).sqrt());
        }
        centroids = Centroids { centers: next };
        trace.push(centroids.objective(x));
        if shift < cfg.tol {
            break;
        }
    }
    KmeansResult {
        ids: centroids.assign(x).expect("same width"),
        centroids,
        iterations,
        objective_trace: trace,
    }
}

/// k-means++ seeding followed by Lloyd iterations; the best of `n_init`
/// restarts by final objective is kept.
pub fn kmeans_fit(features: &Matrix, cfg: &KmeansConfig) -> Result<KmeansResult> {
    cfg.validate()?;
    if features.rows() < cfg.k {
        return Err(Error::invalid(format!(
            "k-means needs at least k={} samples, got {}",
            cfg.k,
            features.rows()
        )));
    }
    if !features.is_finite() {
        return Err(Error::invalid("k-means features must be finite"));
    }
    let mut rng = rng::derived(cfg.seed, "kmeans");
    let mut best: Option<KmeansResult> = None;
    for _ in 0..cfg.n_init {
        let seeds = plus_plus_seeding(features, cfg.k, &mut rng);
        let run = lloyd(features, Centroids { centers: seeds }, cfg);
        let better = best
            .as_ref()
            .is_none_or(|b| run.objective_trace.last() < b.objective_trace.last());
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

pub fn kmeans_cluster(features: &Matrix, cfg: &KmeansConfig) -> Result<Vec<usize>> {
    Ok(kmeans_fit(features, cfg)?.ids)
}

/// Continues training the stacked `unified` head on the union of `datasets`
/// with the swapped objective over the full unified width.
pub fn joint_frozen(
    unified: &UnifiedHead,
    datasets: &[&EmbeddingDataset],
    cfg: &TrainConfig,
) -> Result<(UnifiedHead, EpochLosses)> {
    if datasets.is_empty() {
        return Err(Error::invalid("joint training needs at least one dataset"));
    }
    let union = EmbeddingDataset::concat(datasets)?;
    let (stacked, losses) = train_swapped(unified.stacked(), &union, cfg, "joint")?;
    Ok((unified.with_stacked_weights(&stacked)?, losses))
}
