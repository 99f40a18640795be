use std::path::Path;

use mscincd::classifier::concat;
use mscincd::data::{BlobSpec, EmbeddingDataset};
use mscincd::discovery::{discover_task, TrainConfig};
use mscincd::eval::{evaluate_step, EvalSet};
use mscincd::orchestrator::{prepare_data, run_experiment, DataSource, ExperimentConfig, Method};
use mscincd::replay::{compute_prototypes, ktrfr_finetune, PrototypeMemory};

fn config(method: Method, tasks: usize, classes: usize, epochs: usize, seed: u64, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: 1,
        method,
        seed,
        tasks,
        class_counts: None,
        output_dir: out.to_path_buf(),
        max_steps: None,
        data: DataSource::Synthetic(BlobSpec {
            n_classes: classes,
            per_class: 100,
            dim: 32,
            views: 2,
            center_scale: 8.0,
            within_std: 1.0,
            seed,
        }),
        train: TrainConfig { epochs, batch_size: 128, ..TrainConfig::default() },
        kmeans: Default::default(),
    }
}

#[test]
fn report_structure_and_shared_first_step() {
    let dir = tempfile::tempdir().unwrap();
    let b = run_experiment(&config(Method::Baseline, 3, 12, 10, 2, &dir.path().join("b"))).unwrap();
    let bpp = run_experiment(&config(Method::BaselinePlusPlus, 3, 12, 10, 2, &dir.path().join("bpp"))).unwrap();
    assert!(b.complete && bpp.complete);
    assert_eq!(b.steps.iter().map(|m| m.step).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert_eq!(b.timings.len(), 3);
    // replay fine-tuning is inactive at step 1
    assert_eq!(b.steps[0], bpp.steps[0]);
    for m in &b.steps {
        assert_eq!(m.per_task_accuracy.len(), m.step);
        assert!((0.0..=1.0).contains(&m.accuracy));
    }
}

#[test]
fn kmeans_and_joint_resume_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for method in [Method::Kmeans, Method::JointFrozen] {
        let full = dir.path().join(format!("{method}-full"));
        let part = dir.path().join(format!("{method}-part"));
        run_experiment(&config(method, 3, 9, 4, 5, &full)).unwrap();
        let mut cfg = config(method, 3, 9, 4, 5, &part);
        cfg.max_steps = Some(1);
        let stopped = run_experiment(&cfg).unwrap();
        assert!(!stopped.complete);
        cfg.max_steps = None;
        run_experiment(&cfg).unwrap();
        for f in ["metrics.csv", "heads/step-3.bin", "losses.ndjson"] {
            assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(part.join(f)).unwrap(), "{method} {f}");
        }
    }
}

fn eval_sets_of(data: &mscincd::orchestrator::PreparedData, t: usize) -> Vec<EvalSet> {
    data.eval_sets[..t].to_vec()
}

#[test]
fn replay_finetuning_keeps_task_one_accuracy() {
    let (mut before, mut after) = (0.0, 0.0);
    let seeds = 5;
    for seed in 0..seeds {
        let cfg = config(Method::BaselinePlusPlus, 2, 10, 30, seed, Path::new("unused"));
        let data = prepare_data(&cfg).unwrap();
        let tc = TrainConfig { seed, ..cfg.train };
        let h1 = discover_task(&data.train[0], 5, &tc).unwrap();
        let h2 = discover_task(&data.train[1], 5, &TrainConfig { seed: seed + 100, ..tc }).unwrap().with_task(1);
        let mut memory = PrototypeMemory::new();
        memory.extend(compute_prototypes(&data.train[0], &h1, 0, 0).unwrap()).unwrap();
        let plain = concat(vec![h1.clone(), h2.clone()]).unwrap();
        let step1 = concat(vec![h1]).unwrap();
        let tuned = ktrfr_finetune(&plain, &data.train[1], &h2, &memory, &tc).unwrap().0;
        let sets = eval_sets_of(&data, 2);
        before += evaluate_step(2, &plain, &step1, &sets).unwrap().per_task_accuracy[0];
        after += evaluate_step(2, &tuned, &step1, &sets).unwrap().per_task_accuracy[0];
    }
    let (before, after) = (before / seeds as f64, after / seeds as f64);
    assert!(after >= before - 0.02, "task-1 accuracy {before} -> {after}");
}

#[test]
fn joint_training_is_not_worse_than_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let b = run_experiment(&config(Method::Baseline, 5, 25, 30, 1, &dir.path().join("b"))).unwrap();
    let j = run_experiment(&config(Method::JointFrozen, 5, 25, 30, 1, &dir.path().join("j"))).unwrap();
    let (ab, aj) = (b.last().unwrap().accuracy, j.last().unwrap().accuracy);
    assert!(aj >= ab - 0.01, "joint {aj} vs baseline {ab}");
}

#[test]
fn training_never_touches_embeddings() {
    let cfg = config(Method::JointFrozen, 2, 6, 2, 0, Path::new("unused"));
    let data = prepare_data(&cfg).unwrap();
    let digests: Vec<u64> = data.train.iter().map(EmbeddingDataset::feature_digest).collect();
    let h = discover_task(&data.train[0], 3, &cfg.train).unwrap();
    let _ = mscincd::reference::joint_frozen(&concat(vec![h]).unwrap(), &[&data.train[0], &data.train[1]], &cfg.train).unwrap();
    assert_eq!(data.train.iter().map(EmbeddingDataset::feature_digest).collect::<Vec<_>>(), digests);
}
