//! Task-agnostic evaluation: Hungarian-matched clustering accuracy and
//! maximum forgetting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Square cost matrix for minimum-cost perfect assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentProblem {
    size: usize,
    cost: Vec<f64>,
}

impl AssignmentProblem {
    pub fn new(rows: usize, cols: usize, cost: Vec<f64>) -> Result<Self> {
        if rows != cols {
            return Err(Error::invalid(format!(
                "assignment cost matrix must be square, got {rows}x{cols}"
            )));
        }
        if cost.len() != rows * cols {
            return Err(Error::invalid("cost buffer does not match dimensions"));
        }
        if cost.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("assignment costs must be finite"));
        }
        Ok(AssignmentProblem { size: rows, cost })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cost(&self, row: usize, col: usize) -> f64 {
        self.cost[row * self.size + col]
    }

    /// Total cost of `assignment[row] = col`.
    pub fn total(&self, assignment: &[usize]) -> f64 {
        assignment.iter().enumerate().map(|(r, &c)| self.cost(r, c)).sum()
    }
}

/// Minimum-cost perfect assignment; `result[row]` is the column given to `row`.
///
/// Shortest augmenting path with row/column potentials, O(K³).
pub fn hungarian(problem: &AssignmentProblem) -> Vec<usize> {
    let n = problem.size;
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = problem.cost(r0 - 1, col - 1) - u[r0] - v[col];
                if reduced < minv[col] {
                    minv[col] = reduced;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for col in 1..=n {
        assignment[owner[col] - 1] = col - 1;
    }
    assignment
}

/// Optimal one-to-one map from cluster ids to class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMatch {
    /// `map[cluster]` is the matched class, `None` for padding.
    pub map: Vec<Option<usize>>,
    pub matched: u64,
    pub total: u64,
}

impl ClusterMatch {
    pub fn accuracy(&self) -> f64 {
        self.matched as f64 / self.total as f64
    }

    /// Fraction of `(pred, truth)` pairs this map gets right.
    pub fn accuracy_on(&self, pred: &[usize], truth: &[usize]) -> f64 {
        if pred.is_empty() {
            return 0.0;
        }
        let hits = pred
            .iter()
            .zip(truth)
            .filter(|(&p, &t)| self.map.get(p).copied().flatten() == Some(t))
            .count();
        hits as f64 / pred.len() as f64
    }
}

/// Contingency table → padded square problem → Hungarian on negated counts.
pub fn match_clusters(
    pred: &[usize],
    truth: &[usize],
    n_clusters: usize,
    n_classes: usize,
) -> Result<ClusterMatch> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("cannot score an empty prediction set"));
    }
    if let Some(&p) = pred.iter().find(|&&p| p >= n_clusters) {
        return Err(Error::invalid(format!("cluster id {p} outside [0, {n_clusters})")));
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= n_classes) {
        return Err(Error::invalid(format!("class label {t} outside [0, {n_classes})")));
    }
    let k = n_clusters.max(n_classes);
    let mut counts = vec![0i64; k * k];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p * k + t] += 1;
    }
    let problem = AssignmentProblem::new(k, k, counts.iter().map(|&c| -(c as f64)).collect())?;
    let assignment = hungarian(&problem);
    let mut matched = 0u64;
    let map = assignment
        .iter()
        .enumerate()
        .map(|(cluster, &class)| {
            if cluster < n_clusters && class < n_classes {
                matched += counts[cluster * k + class] as u64;
                Some(class)
            } else {
                None
            }
        })
        .collect();
    Ok(ClusterMatch {
        map,
        matched,
        total: pred.len() as u64,
    })
}

pub fn clustering_accuracy(
    pred: &[usize],
    truth: &[usize],
    n_clusters: usize,
    n_classes: usize,
) -> Result<f64> {
    Ok(match_clusters(pred, truth, n_clusters, n_classes)?.accuracy())
}

/// Anything that assigns global cluster ids to raw embeddings.
pub trait Predictor {
    fn n_clusters(&self) -> usize;
    fn predict_batch(&self, features: &Matrix) -> Result<Vec<usize>>;
}

impl Predictor for crate::classifier::UnifiedHead {
    fn n_clusters(&self) -> usize {
        self.total_classes()
    }

    fn predict_batch(&self, features: &Matrix) -> Result<Vec<usize>> {
        crate::classifier::UnifiedHead::predict_batch(self, features)
    }
}

/// Test samples of one task with labels in the compact global class space
/// (task 1's classes first, then task 2's, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// Number of classes this task owns.
    pub n_classes: usize,
}

fn total_classes(sets: &[EvalSet]) -> usize {
    sets.iter().map(|s| s.n_classes).sum()
}

struct GlobalEval {
    matching: ClusterMatch,
    preds: Vec<Vec<usize>>,
}

fn global_eval(model: &dyn Predictor, sets: &[EvalSet]) -> Result<GlobalEval> {
    let preds = sets
        .iter()
        .map(|s| model.predict_batch(&s.features))
        .collect::<Result<Vec<_>>>()?;
    let all_pred: Vec<usize> = preds.iter().flatten().copied().collect();
    let all_true: Vec<usize> = sets.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let matching = match_clusters(&all_pred, &all_true, model.n_clusters(), total_classes(sets))?;
    Ok(GlobalEval { matching, preds })
}

/// Overall accuracy over the union of all test sets with one global matching.
pub fn overall_accuracy(model: &dyn Predictor, sets: &[EvalSet]) -> Result<f64> {
    Ok(global_eval(model, sets)?.matching.accuracy())
}

/// Step-1 model accuracy on task 1 minus the unified model's accuracy on
/// task-1 samples under the global matching.
pub fn maximum_forgetting(step1: &dyn Predictor, unified: &dyn Predictor, sets: &[EvalSet]) -> Result<f64> {
    let ge = global_eval(unified, sets)?;
    forgetting_from(step1, &ge, sets)
}

fn forgetting_from(step1: &dyn Predictor, ge: &GlobalEval, sets: &[EvalSet]) -> Result<f64> {
    let first = sets
        .first()
        .ok_or_else(|| Error::invalid("forgetting needs the task-1 test set"))?;
    let p1 = step1.predict_batch(&first.features)?;
    let before = clustering_accuracy(&p1, &first.labels, step1.n_clusters(), first.n_classes)?;
    let after = ge.matching.accuracy_on(&ge.preds[0], &first.labels);
    Ok(before - after)
}

/// Metrics after one step of a task sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub accuracy: f64,
    pub forgetting: f64,
    pub per_task_accuracy: Vec<f64>,
    pub n_samples: usize,
}

/// Scores `model` on the test sets of tasks `1..=step`. `step1` is the model
/// that existed right after step 1.
pub fn evaluate_step(
    step: usize,
    model: &dyn Predictor,
    step1: &dyn Predictor,
    sets: &[EvalSet],
) -> Result<StepMetrics> {
    let ge = global_eval(model, sets)?;
    let forgetting = forgetting_from(step1, &ge, sets)?;
    let per_task_accuracy = sets
        .iter()
        .zip(&ge.preds)
        .map(|(s, p)| ge.matching.accuracy_on(p, &s.labels))
        .collect();
    Ok(StepMetrics {
        step,
        accuracy: ge.matching.accuracy(),
        forgetting,
        per_task_accuracy,
        n_samples: ge.matching.total as usize,
    })
}
