//! Experiment runner.
//!
//! A run walks the task sequence one step at a time. Every step discovers
//! the new task (or re-clusters pooled data for `kmeans`), updates the model,
//! scores it on the test sets of all tasks so far and commits heads, memory,
//! metrics and the RNG state to the run directory. An interrupted run picks up
//! after its last committed step and ends bitwise identical to an
//! uninterrupted one: model state is rounded to its on-disk f32 precision at
//! every step boundary in both cases.

pub mod checkpoint;
pub mod config;
pub mod report;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::classifier::{concat, read_heads, write_heads, CosineHead, UnifiedHead};
use crate::data::{
    class_group_sizes, make_blobs, read_embeddings, split_sequence_pair, split_sequence_with_sizes,
    EmbeddingDataset, TaskSplit,
};
use crate::discovery::{discover_task_logged, EpochLosses};
use crate::error::{Error, Result};
use crate::eval::{evaluate_step, EvalSet, Predictor, StepMetrics};
use crate::reference::{joint_frozen, kmeans_fit, Centroids, KmeansConfig};
use crate::replay::{compute_prototypes, ktrfr_finetune, read_memory, write_memory, PrototypeMemory};
use crate::rng::{self, Rng, RngState};

use checkpoint::{
    digest_text, read_checkpoint, resume_error, write_checkpoint, Checkpoint, RunDir, StepTiming,
    LOSSES_FILE, MEMORY_FILE, METRICS_FILE, REPORT_FILE, SNAPSHOT_FILE,
};
pub use config::{load_config, DataSource, ExperimentConfig, Method};
pub use report::RunReport;

/// Training sets and test sets of every task, labels already compact.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<EmbeddingDataset>,
    pub eval_sets: Vec<EvalSet>,
    pub class_counts: Vec<usize>,
}

fn build(split: &TaskSplit, train_ds: &EmbeddingDataset, test_ds: &EmbeddingDataset) -> Result<PreparedData> {
    let mut train = Vec::with_capacity(split.tasks.len());
    let mut eval_sets = Vec::with_capacity(split.tasks.len());
    let mut offset = 0;
    for part in &split.tasks {
        if part.train.is_empty() || part.test.is_empty() {
            return Err(Error::invalid(format!(
                "task with classes {:?} has an empty train or test portion",
                part.classes
            )));
        }
        train.push(train_ds.subset(&part.train)?);
        let test = test_ds.subset(&part.test)?;
        let labels = test
            .require_labels("evaluation")?
            .iter()
            .map(|l| offset + part.classes.binary_search(l).expect("test label belongs to its task"))
            .collect();
        eval_sets.push(EvalSet {
            features: test.view_matrix(0)?,
            labels,
            n_classes: part.classes.len(),
        });
        offset += part.classes.len();
    }
    Ok(PreparedData { train, eval_sets, class_counts: split.class_counts() })
}

/// Loads or synthesizes the data and splits it into the task sequence.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let sizes = |n: usize| match &cfg.class_counts {
        Some(c) => Ok(c.clone()),
        None => class_group_sizes(n, cfg.tasks),
    };
    match &cfg.data {
        DataSource::Synthetic(spec) => {
            let ds = make_blobs(spec)?;
            let split = split_sequence_with_sizes(&ds, &sizes(ds.n_classes())?, cfg.seed)?;
            build(&split, &ds, &ds)
        }
        DataSource::Files { train, test: None } => {
            let ds = read_embeddings(train)?;
            ds.require_labels("task splitting")?;
            let n = ds.labels().expect("checked").iter().collect::<std::collections::BTreeSet<_>>().len();
            let split = split_sequence_with_sizes(&ds, &sizes(n)?, cfg.seed)?;
            build(&split, &ds, &ds)
        }
        DataSource::Files { train, test: Some(test) } => {
            let tr = read_embeddings(train)?;
            let te = read_embeddings(test)?;
            if tr.dim() != te.dim() {
                return Err(Error::invalid("train and test embeddings differ in dimension"));
            }
            let split = split_sequence_pair(&tr, &te, cfg.class_counts.as_deref(), cfg.tasks, cfg.seed)?;
            build(&split, &tr, &te)
        }
    }
}

/// One line of losses.ndjson.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub task: usize,
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
}

fn records<'a>(task: usize, phase: &str, losses: &'a EpochLosses) -> impl Iterator<Item = LossRecord> + 'a {
    let phase = phase.to_string();
    losses.iter().enumerate().map(move |(e, &loss)| LossRecord {
        task,
        phase: phase.clone(),
        epoch: e + 1,
        loss,
    })
}

#[derive(Debug, Clone)]
enum Model {
    Heads(UnifiedHead),
    Centroids(Centroids),
}

impl Model {
    fn predictor(&self) -> &dyn Predictor {
        match self {
            Model::Heads(u) => u,
            Model::Centroids(c) => c,
        }
    }

    fn blocks(&self, step: usize) -> Vec<CosineHead> {
        match self {
            Model::Heads(u) => u.heads().to_vec(),
            Model::Centroids(c) => vec![CosineHead::new(c.centers.clone(), step - 1)],
        }
    }

    fn from_blocks(method: Method, blocks: Vec<CosineHead>) -> Result<Model> {
        match method {
            Method::Kmeans => {
                let [block] = <[CosineHead; 1]>::try_from(blocks)
                    .map_err(|_| Error::invalid("k-means checkpoint must hold one center block"))?;
                Ok(Model::Centroids(Centroids { centers: block.weights().clone() }))
            }
            _ => Ok(Model::Heads(concat(blocks)?)),
        }
    }
}

struct RunState {
    completed: usize,
    rng: Rng,
    metrics: Vec<StepMetrics>,
    timings: Vec<StepTiming>,
    model: Option<Model>,
    step1: Option<Model>,
    memory: PrototypeMemory,
    /// Task heads as discovered, before joint training (joint-frozen only).
    discovered: Vec<CosineHead>,
}

fn load_model(dir: &RunDir, method: Method, step: usize, expected_classes: usize) -> Result<Model> {
    let path = dir.heads(step);
    let model = read_heads(&path)
        .and_then(|b| Model::from_blocks(method, b))
        .map_err(|e| resume_error(&path, e))?;
    if model.predictor().n_clusters() != expected_classes {
        return Err(Error::Resume {
            path,
            message: format!(
                "holds {} clusters, expected {expected_classes}",
                model.predictor().n_clusters()
            ),
        });
    }
    Ok(model)
}

fn resume(dir: &RunDir, cfg: &ExperimentConfig, data: &PreparedData, ck: Checkpoint, identity: &str) -> Result<RunState> {
    let ck_path = dir.file(checkpoint::CHECKPOINT_FILE);
    if ck.config_digest != identity {
        return Err(Error::Resume {
            path: ck_path,
            message: "was written for a different configuration".into(),
        });
    }
    if ck.completed_steps > cfg.tasks {
        return Err(Error::Resume {
            path: ck_path,
            message: format!("records {} steps of a {}-task run", ck.completed_steps, cfg.tasks),
        });
    }
    let rng = ck.rng.restore().ok_or_else(|| Error::Resume {
        path: ck_path.clone(),
        message: "malformed RNG state".into(),
    })?;
    let seen = |t: usize| data.class_counts[..t].iter().sum::<usize>();
    let (model, step1) = if ck.completed_steps == 0 {
        (None, None)
    } else {
        let model = load_model(dir, cfg.method, ck.completed_steps, seen(ck.completed_steps))?;
        let step1 = load_model(dir, cfg.method, 1, seen(1))?;
        (Some(model), Some(step1))
    };
    let mut memory = PrototypeMemory::new();
    if cfg.method == Method::BaselinePlusPlus && ck.completed_steps > 0 {
        let path = dir.file(MEMORY_FILE);
        let stored = read_memory(&path).map_err(|e| resume_error(&path, e))?;
        // memory.bin may already hold the prototypes of an uncommitted step
        let kept: Vec<_> = stored
            .prototypes()
            .iter()
            .filter(|p| p.task < ck.completed_steps)
            .cloned()
            .collect();
        if kept.iter().map(|p| p.task).max() != Some(ck.completed_steps - 1) {
            return Err(Error::Resume { path, message: "lacks the prototypes of the last step".into() });
        }
        memory.extend(kept).map_err(|e| resume_error(&path, e))?;
    }
    let discovered = if cfg.method == Method::JointFrozen && ck.completed_steps > 0 {
        let path = dir.discovered(ck.completed_steps);
        let heads = read_heads(&path).map_err(|e| resume_error(&path, e))?;
        if heads.len() != ck.completed_steps {
            return Err(Error::Resume { path, message: "wrong number of task heads".into() });
        }
        heads
    } else {
        Vec::new()
    };
    Ok(RunState {
        completed: ck.completed_steps,
        rng,
        metrics: ck.metrics,
        timings: ck.timings,
        model,
        step1,
        memory,
        discovered,
    })
}

fn read_losses(path: &Path, completed: usize) -> Result<Vec<LossRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = String::from_utf8(binio::read_file(path)?).map_err(|e| resume_error(path, Error::invalid(e.to_string())))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: LossRecord = serde_json::from_str(line).map_err(|e| Error::Resume {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if r.task <= completed {
            out.push(r);
        }
    }
    Ok(out)
}

fn encode_losses(records: &[LossRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("loss record serializes");
        out.push(b'\n');
    }
    out
}

struct StepOutput {
    model: Model,
    losses: Vec<LossRecord>,
}

fn run_step(cfg: &ExperimentConfig, data: &PreparedData, state: &mut RunState, t: usize, seed: u64) -> Result<StepOutput> {
    let mut tc = cfg.train;
    tc.seed = seed;
    let train_t = &data.train[t - 1];
    let mut losses = Vec::new();
    if cfg.method == Method::Kmeans {
        let pooled = EmbeddingDataset::concat(&data.train[..t].iter().collect::<Vec<_>>())?;
        let km = KmeansConfig {
            k: data.class_counts[..t].iter().sum(),
            seed,
            ..cfg.kmeans
        };
        let mut fit = kmeans_fit(&pooled.view_matrix(0)?, &km)?;
        binio::quantize_f32(fit.centroids.centers.as_mut_slice());
        let trace: EpochLosses = fit.objective_trace[1..].to_vec();
        losses.extend(records(t, "kmeans", &trace));
        return Ok(StepOutput { model: Model::Centroids(fit.centroids), losses });
    }

    let (head, l) = discover_task_logged(train_t, data.class_counts[t - 1], &tc)?;
    let head = head.with_task(t - 1);
    losses.extend(records(t, "discovery", &l));
    let mut unified = match state.model.take() {
        None => concat(vec![head.clone()])?,
        Some(Model::Heads(u)) => u.push(head.clone())?,
        Some(Model::Centroids(_)) => unreachable!("head methods never hold centroids"),
    };
    let offset = unified.offset(t - 1);
    match cfg.method {
        Method::BaselinePlusPlus => {
            if t >= 2 {
                let (u, l) = ktrfr_finetune(&unified, train_t, &head, &state.memory, &tc)?;
                unified = u;
                losses.extend(records(t, "ktrfr", &l));
            }
            state.memory.extend(compute_prototypes(train_t, &head, t - 1, offset)?)?;
            state.memory.quantize();
        }
        Method::JointFrozen => {
            // joint training always starts from the discovered heads
            let mut raw = head.clone();
            binio::quantize_f32(raw.weights_mut());
            state.discovered.push(raw);
            let seen: Vec<&EmbeddingDataset> = data.train[..t].iter().collect();
            let (u, l) = joint_frozen(&concat(state.discovered.clone())?, &seen, &tc)?;
            unified = u;
            losses.extend(records(t, "joint", &l));
        }
        Method::Baseline | Method::Kmeans => {}
    }
    unified.quantize();
    Ok(StepOutput { model: Model::Heads(unified), losses })
}

fn report_of(cfg: &ExperimentConfig, state: &RunState) -> RunReport {
    RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        method: cfg.method,
        config: cfg.clone(),
        steps: state.metrics.clone(),
        timings: state.timings.clone(),
        complete: state.completed == cfg.tasks,
    }
}

/// Runs (or resumes) the experiment described by `cfg` in `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    run_experiment_with(cfg, |_| {})
}

/// As [`run_experiment`], calling `on_step` after every committed step.
pub fn run_experiment_with(cfg: &ExperimentConfig, mut on_step: impl FnMut(&StepMetrics)) -> Result<RunReport> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    if data.class_counts.len() != cfg.tasks {
        return Err(Error::invalid("split produced a different number of tasks"));
    }
    let dir = RunDir::new(&cfg.output_dir);
    let identity = digest_text(&cfg.resume_identity()?);
    let mut state = match read_checkpoint(&dir)? {
        Some(ck) => resume(&dir, cfg, &data, ck, &identity)?,
        None => RunState {
            completed: 0,
            rng: rng::derived(cfg.seed, "experiment"),
            metrics: Vec::new(),
            timings: Vec::new(),
            model: None,
            step1: None,
            memory: PrototypeMemory::new(),
            discovered: Vec::new(),
        },
    };
    let mut losses = read_losses(&dir.file(LOSSES_FILE), state.completed)?;
    binio::write_atomic(&dir.file(SNAPSHOT_FILE), cfg.to_toml()?.as_bytes())?;

    let stop = cfg.max_steps.unwrap_or(cfg.tasks).min(cfg.tasks);
    for t in state.completed + 1..=stop {
        let started = Instant::now();
        let seed = rng::next_seed(&mut state.rng);
        let out = run_step(cfg, &data, &mut state, t, seed)?;
        if t == 1 {
            state.step1 = Some(out.model.clone());
        }
        let step1 = state.step1.as_ref().expect("step 1 done");
        let metrics = evaluate_step(t, out.model.predictor(), step1.predictor(), &data.eval_sets[..t])?;

        write_heads(&dir.heads(t), &out.model.blocks(t))?;
        if cfg.method == Method::BaselinePlusPlus {
            write_memory(&dir.file(MEMORY_FILE), &state.memory)?;
        }
        if cfg.method == Method::JointFrozen {
            write_heads(&dir.discovered(t), &state.discovered)?;
        }
        losses.extend(out.losses);
        binio::write_atomic(&dir.file(LOSSES_FILE), &encode_losses(&losses))?;
        state.model = Some(out.model);
        state.completed = t;
        state.metrics.push(metrics);
        state.timings.push(StepTiming { step: t, seconds: started.elapsed().as_secs_f64() });
        report::write_metrics(&dir.file(METRICS_FILE), cfg.method, &state.metrics)?;
        let report = report_of(cfg, &state);
        let json = serde_json::to_vec_pretty(&report).expect("report serializes");
        binio::write_atomic(&dir.file(REPORT_FILE), &json)?;
        write_checkpoint(
            &dir,
            &Checkpoint {
                completed_steps: t,
                config_digest: identity.clone(),
                rng: RngState::capture(&state.rng),
                metrics: state.metrics.clone(),
                timings: state.timings.clone(),
            },
        )?;
        on_step(state.metrics.last().expect("just pushed"));
    }
    Ok(report_of(cfg, &state))
}

/// Re-scores the saved per-step models of a run directory.
pub fn rescore_run(run_dir: &Path) -> Result<Vec<StepMetrics>> {
    let dir = RunDir::new(run_dir);
    let snap = dir.file(SNAPSHOT_FILE);
    let text = std::fs::read_to_string(&snap).map_err(|e| Error::io(&snap, e))?;
    let cfg = ExperimentConfig::from_toml(&text).map_err(|e| resume_error(&snap, e))?;
    let data = prepare_data(&cfg)?;
    let completed = match read_checkpoint(&dir)? {
        Some(ck) => ck.completed_steps,
        None => return Err(Error::InvalidState(format!("{} has no completed steps", run_dir.display()))),
    };
    let seen = |t: usize| data.class_counts[..t].iter().sum::<usize>();
    let step1 = load_model(&dir, cfg.method, 1, seen(1))?;
    (1..=completed.min(cfg.tasks))
        .map(|t| {
            let m = load_model(&dir, cfg.method, t, seen(t))?;
            evaluate_step(t, m.predictor(), step1.predictor(), &data.eval_sets[..t])
        })
        .collect()
}
