//! Continual learning for blind quality regression.
//!
//! A frozen convolutional backbone is shared by every task. Each task owns a
//! bank of normalization parameters (running mean and variance plus the
//! affine scale and shift) and a linear prediction head. At inference every
//! head is evaluated under its own bank, and the scores are blended by a
//! K-means softmin gate computed from features extracted under a separate
//! distortion-aware bank.
//!
//! Module map:
//!
//! * [`numerics`]: tensors, layer kernels with backward passes, Adam, `Φ`.
//! * [`backbone`]: the frozen feature extractor and prediction heads.
//! * [`normbank`]: per-task normalization banks and the registry.
//! * [`synthdata`]: procedural distortion tasks, splits and pair sampling.
//! * [`trainer`]: pairwise fidelity-loss training.
//! * [`gating`]: K-means summaries and softmin head weighting.
//! * [`predictor`]: oracle, soft and hard inference.
//! * [`metrics`]: SRCC and the continual-learning indices, bank KL analysis.
//! * [`harness`]: sequence runs, ablations, checkpoints and exports.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod backbone;
pub mod error;
pub mod gating;
pub mod harness;
pub mod metrics;
pub mod normbank;
pub mod numerics;
pub mod predictor;
pub mod seed;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
