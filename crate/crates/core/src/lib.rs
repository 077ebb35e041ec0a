//! Conflict-aware merging of fine-tuned task vectors.
//!
//! Start with [`merging::merge_cat`] or the `catmerge` CLI.

pub mod conflict;
pub mod error;
pub mod merging;
pub mod netexec;
pub mod rng;
pub mod speclinalg;
pub mod synthbench;
pub mod tensorio;
pub mod trimming;

pub use error::{Error, Result};
pub use speclinalg::Matrix;
pub use tensorio::{Checkpoint, ParamKind, Tensor};
