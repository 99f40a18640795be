//! Experiment configuration: a TOML tree with dotted-key overrides.
//!
//! ```toml
//! schema_version = 1
//! method = "baseline++"        # baseline | baseline++ | kmeans | joint-frozen
//! seed = 0
//! tasks = 5
//! # class_counts = [10, 10, 10, 10, 10]
//! output_dir = "runs/bpp"
//!
//! [data]
//! kind = "synthetic"            # or "files" with `train` and optional `test`
//! n_classes = 50
//! per_class = 200
//! dim = 64
//! views = 2
//! center_scale = 8.0
//! within_std = 1.0
//! seed = 0
//!
//! [train]
//! epochs = 50
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::BlobSpec;
use crate::discovery::TrainConfig;
use crate::error::{Error, Result};
use crate::reference::KmeansConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "baseline++")]
    BaselinePlusPlus,
    #[serde(rename = "kmeans")]
    Kmeans,
    #[serde(rename = "joint-frozen")]
    JointFrozen,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::BaselinePlusPlus => "baseline++",
            Method::Kmeans => "kmeans",
            Method::JointFrozen => "joint-frozen",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        [Method::Baseline, Method::BaselinePlusPlus, Method::Kmeans, Method::JointFrozen]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(BlobSpec),
    /// MSCE files. Without `test`, a fifth of each class is held out of `train`.
    Files {
        train: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    pub tasks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_counts: Option<Vec<usize>>,
    pub output_dir: PathBuf,
    /// Stop after this many completed steps; a later run resumes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    pub data: DataSource,
    /// Shared by discovery, replay fine-tuning and joint training. Its seed is
    /// replaced by per-step seeds drawn from the experiment seed.
    #[serde(default)]
    pub train: TrainConfig,
    /// Used by `kmeans`; `k` is set to the number of classes seen so far.
    #[serde(default)]
    pub kmeans: KmeansConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.tasks == 0 {
            return Err(Error::Config("tasks must be at least 1".into()));
        }
        if let Some(counts) = &self.class_counts {
            if counts.len() != self.tasks {
                return Err(Error::Config(format!(
                    "class_counts has {} entries for {} tasks",
                    counts.len(),
                    self.tasks
                )));
            }
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            if spec.n_classes < 2 * self.tasks && self.method != Method::Kmeans {
                return Err(Error::Config(format!(
                    "{} synthetic classes cannot give {} tasks two classes each",
                    spec.n_classes, self.tasks
                )));
            }
        }
        self.train.validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        let mut km = self.kmeans;
        km.k = km.k.max(2);
        km.validate().map_err(|e| Error::Config(format!("kmeans: {e}")))?;
        Ok(())
    }

    /// Canonical TOML text, as stored in `config.snapshot`.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Snapshot with the fields that may change between an interrupted run
    /// and its resumption cleared.
    pub(crate) fn resume_identity(&self) -> Result<String> {
        let mut c = self.clone();
        c.max_steps = None;
        c.output_dir = PathBuf::new();
        c.to_toml()
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let DataSource::Files { train, test } = &mut self.data {
            fix(train);
            if let Some(t) = test {
                fix(t);
            }
        }
    }
}

/// Sets `key` (dotted path) in `tree` to `raw`, parsed as a TOML value when
/// possible and as a bare string otherwise.
pub fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {assignment:?} has an empty key")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut node = tree;
    for p in parts {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Reads, overrides, resolves and validates a config file.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut tree: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    let mut cfg: ExperimentConfig = tree
        .try_into()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    cfg.resolve_paths(base);
    cfg.validate()?;
    Ok(cfg)
}
