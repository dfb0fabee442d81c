//! Contrastive image-complexity toolkit.
//!
//! Multi-scale Random Crop and Mix augmentation, training-free complexity
//! scorers, a momentum-contrast learner with a multi-positive InfoNCE loss,
//! frozen-encoder fine-tuning with PCC/SRCC evaluation, dataset complexity
//! distribution analysis, and feature-map fusion.
//!
//! Batch work (per-sample gradients, dataset scoring, dataset expansion) runs
//! on rayon when the default `parallel` feature is on and sequentially
//! otherwise; results are identical either way.

// `!(x > 0.0)` checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod finetune;
pub mod fusion;
pub mod heuristics;
pub mod icd;
pub mod imagecore;
pub mod manifest;
pub mod moco;
pub mod nn;
pub mod par;
pub mod rcm;
pub mod synth;

pub use error::{Error, Result};
