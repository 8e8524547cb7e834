//! Recurrent fast-weight replacements for causal self-attention.
//!
//! The central object is a fast-weight memory: a matrix `S` (optionally
//! paired with a normalizer vector `z`) that is updated once per token by
//! an outer-product write and read once per token by a matrix-vector
//! product. Four update rules are provided — `add`, `gated`, `delta`, and
//! `decay` — together with the kernel feature maps and normalization
//! choices they compose with, exact quadratic-time attention references,
//! analytically derived backward passes, a small byte-level language model
//! for end-to-end training, and a per-token generation benchmark.
//!
//! Sequence processing comes in two equivalent forms: `scan` over a whole
//! sequence (training) and repeated `step` on a carried state (inference),
//! which is what makes per-token generation O(1) in sequence length.

pub mod ablate;
pub mod attention;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod featmap;
pub mod genbench;
pub mod gradients;
pub mod model;
pub mod real;
pub mod rules;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use featmap::{apply_feature_map, sum_normalize, FeatureMapKind, FeatureMapParams};
pub use real::Real;
pub use rules::{FastWeightState, GateParams, RuleConfig, RuleKind, RuleParams, SequenceCache};
pub use tensor::{Matrix, Vector};
