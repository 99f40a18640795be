//! Run-directory layout and the per-step commit record.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::eval::StepMetrics;
use crate::rng::RngState;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const MEMORY_FILE: &str = "memory.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const LOSSES_FILE: &str = "losses.ndjson";

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn heads(&self, step: usize) -> PathBuf {
        self.root.join("heads").join(format!("step-{step}.bin"))
    }

    /// Un-jointly-trained task heads of `joint-frozen` runs.
    pub fn discovered(&self, step: usize) -> PathBuf {
        self.root.join("heads").join(format!("discovered-{step}.bin"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub step: usize,
    pub seconds: f64,
}

/// Written last in every step; a run resumes from the step it names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub completed_steps: usize,
    /// Digest of the config snapshot without its stop point and location.
    pub config_digest: String,
    pub rng: RngState,
    pub metrics: Vec<StepMetrics>,
    pub timings: Vec<StepTiming>,
}

pub(crate) fn digest_text(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn write_checkpoint(dir: &RunDir, ck: &Checkpoint) -> Result<()> {
    let text = serde_json::to_vec_pretty(ck).expect("checkpoint serializes");
    binio::write_atomic(&dir.file(CHECKPOINT_FILE), &text)
}

/// `Ok(None)` when the directory holds no checkpoint yet.
pub fn read_checkpoint(dir: &RunDir) -> Result<Option<Checkpoint>> {
    let path = dir.file(CHECKPOINT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = binio::read_file(&path).map_err(|e| resume_error(&path, e))?;
    let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::Resume {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if ck.metrics.len() != ck.completed_steps
        || ck.metrics.iter().enumerate().any(|(i, m)| m.step != i + 1)
    {
        return Err(Error::Resume {
            path,
            message: "metrics do not match the completed step count".into(),
        });
    }
    Ok(Some(ck))
}

/// Rewraps any error from loading a resume artifact so it names the file.
pub(crate) fn resume_error(path: &Path, e: Error) -> Error {
    match e {
        Error::Resume { .. } => e,
        other => Error::Resume { path: path.to_path_buf(), message: other.to_string() },
    }
}
