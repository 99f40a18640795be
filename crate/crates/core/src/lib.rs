//! Multi-step class-incremental novel class discovery over frozen feature
//! embeddings.
//!
//! Each task of a sequence brings a fresh unlabelled set of samples from
//! classes never seen before. A cosine-normalized linear head is trained per
//! task by swapped prediction against Sinkhorn-Knopp codes; heads are
//! concatenated for task-agnostic inference. The `baseline++` method further
//! fine-tunes the concatenated head with features replayed from per-class
//! Gaussian prototypes of earlier tasks.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`numerics`] | normalization, softmax, cross-entropy, SGD, LR schedule |
//! | [`sinkhorn`] | soft pseudo-label codes |
//! | [`classifier`] | cosine heads, unified head, prediction |
//! | [`discovery`] | per-task swapped-prediction training |
//! | [`replay`] | Gaussian prototypes and replay fine-tuning |
//! | [`eval`] | Hungarian matching, accuracy, forgetting |
//! | [`data`] | MSCE embedding files, synthetic blobs, task splits |
//! | [`reference`] | pooled k-means and joint (frozen) trainer |
//! | [`orchestrator`] | experiment runner, checkpoints, reports |
//! | [`cli`] | command-line entry point |

mod binio;
pub mod classifier;
pub mod cli;
pub mod data;
pub mod discovery;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod orchestrator;
mod par;
pub mod reference;
pub mod replay;
pub mod rng;
pub mod sinkhorn;

pub use error::{Error, Result};
