// SPDX-License-Identifier: MIT OR Apache-2.0

//! # mixlab
//!
//! A desk-scale laboratory for studying in-context retrieval circuits in
//! tiny sequence models. Attention heads and scalar-gated state-space (SSD)
//! heads are both expressed as *materialized* lower-triangular T×T mixing
//! matrices, which gives the two families one shared execution path and one
//! shared intervention surface: head ablation, layer pruning, gather /
//! aggregate masking, query-row zeroing, and cross-model layer swaps.
//!
//! The crate trains 2–6 layer models deterministically on CPU over a closed
//! synthetic task suite (key-value retrieval, letter-label multiple choice,
//! chat reformatting, and weight-stored fact likelihood) and provides the
//! analysis pipelines used to locate and characterize retrieval heads:
//! pruning sweeps, head rankings, four-configuration grids, redundancy
//! curves, masking sufficiency checks, and hybrid layer-replacement sweeps.
//!
//! See the `book/` guide for a narrative walk-through.

pub mod analysis;
pub mod error;
pub mod harness;
pub mod interventions;
pub mod mixers;
pub mod model;
pub mod report;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};

/// The `book/` guide's code blocks compile and run as doc-tests, keeping
/// the narrative documentation in sync with the crate.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/mixing-matrices.md")]
    mod mixing_matrices {}
    #[doc = include_str!("../../../book/src/models-training.md")]
    mod models_training {}
    #[doc = include_str!("../../../book/src/tasks-evaluation.md")]
    mod tasks_evaluation {}
    #[doc = include_str!("../../../book/src/interventions.md")]
    mod interventions {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
