//! Adaptive multi-teacher distillation for joint semantic segmentation and
//! depth estimation, built on a small f64 tensor engine.
//!
//! Two frozen single-task teachers feed a trainable connector whose outputs
//! a compact multi-task student distills from, with per-task connector
//! weights driven by validation feedback and an extra loss on the
//! trajectories of attention-map peaks.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod feedback;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod synthdata;
pub mod tensor;
pub mod trajectory;

pub use error::{Error, Result};
