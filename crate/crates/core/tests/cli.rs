use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mscincd"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, method: &str, data: &str) -> PathBuf {
    let text = format!(
        r#"schema_version = 1
method = "{method}"
seed = 1
tasks = 2
output_dir = "{name}"

[data]
{data}

[train]
epochs = 5
batch_size = 64
"#
    );
    let p = dir.join(format!("{name}.toml"));
    std::fs::write(&p, text).unwrap();
    p
}

const SYNTH: &str = r#"kind = "synthetic"
n_classes = 6
per_class = 40
dim = 16
views = 2
center_scale = 8.0
within_std = 1.0
seed = 4"#;

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let o = run(&["run", "--config", "missing.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.toml"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_exits_1_with_usage() {
    let o = run(&["run", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).to_lowercase().contains("usage"));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "r", "baseline", SYNTH);
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--override", "tasks=0"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn synth_then_run_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.msce");
    let o = run(&[
        "synth", "--classes", "10", "--per-class", "100", "--dim", "64", "--out",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = write_config(dir.path(), "files", "baseline", "kind = \"files\"\ntrain = \"d.msce\"");
    let o = run(&["run", "--quiet", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("files/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    for f in ["config.snapshot", "heads/step-1.bin", "heads/step-2.bin", "report.json", "losses.ndjson", "checkpoint.json"] {
        assert!(dir.path().join("files").join(f).exists(), "{f}");
    }
}

#[test]
fn corrupt_data_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("d.msce"), b"MSCE\x01\x00").unwrap();
    let cfg = write_config(dir.path(), "bad", "baseline", "kind = \"files\"\ntrain = \"d.msce\"");
    let o = run(&["run", "--quiet", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn report_has_one_row_per_method_and_eval_rescores() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for m in ["baseline", "baseline++"] {
        let name = m.replace('+', "p");
        let cfg = write_config(dir.path(), &name, m, SYNTH);
        let o = run(&["run", "--quiet", "--config", cfg.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        runs.push(dir.path().join(name));
    }
    let out = dir.path().join("table.md");
    let o = run(&[
        "report", "--runs", runs[0].to_str().unwrap(), runs[1].to_str().unwrap(), "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(&out).unwrap();
    assert!(table.contains("𝓐") && table.contains("𝓕"));
    assert_eq!(table.lines().filter(|l| l.starts_with("| baseline |")).count(), 1);
    assert_eq!(table.lines().filter(|l| l.starts_with("| baseline++ |")).count(), 1);

    let o = run(&["eval", "--run", runs[1].to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let saved = std::fs::read_to_string(runs[1].join("metrics.csv")).unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), saved);
}

#[test]
fn corrupted_checkpoint_files_are_named_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c", "baseline++", SYNTH);
    let cfg = cfg.to_str().unwrap();
    let o = run(&["run", "--quiet", "--config", cfg, "--override", "max_steps=1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run_dir = dir.path().join("c");

    let heads = run_dir.join("heads/step-1.bin");
    let good = std::fs::read(&heads).unwrap();
    std::fs::write(&heads, &good[..good.len() - 3]).unwrap();
    let o = run(&["run", "--quiet", "--config", cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("step-1.bin"), "{}", stderr(&o));
    std::fs::write(&heads, &good).unwrap();

    let memory = run_dir.join("memory.bin");
    let good_mem = std::fs::read(&memory).unwrap();
    std::fs::write(&memory, &good_mem[..10]).unwrap();
    let o = run(&["run", "--quiet", "--config", cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("memory.bin"), "{}", stderr(&o));
    std::fs::write(&memory, &good_mem).unwrap();

    let ck = run_dir.join("checkpoint.json");
    let good_ck = std::fs::read(&ck).unwrap();
    std::fs::write(&ck, b"{ not json").unwrap();
    let o = run(&["run", "--quiet", "--config", cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint.json"), "{}", stderr(&o));
    std::fs::write(&ck, &good_ck).unwrap();

    let o = run(&["run", "--quiet", "--config", cfg, "--override", "seed=99"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("different configuration"), "{}", stderr(&o));

    let o = run(&["run", "--quiet", "--config", cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
}
