//! Parameter-efficient sparse training on desk-scale networks.
//!
//! The crate trains small dense models while learning *which* weights to
//! keep: an importance score built from a frozen weight magnitude, a
//! low-rank trainable term and structured row/column accumulators decides
//! the top-v mask at every step. Magnitude and movement pruning are
//! included as baselines, together with diagnostics that compare the
//! masks the criteria produce.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod importance;
pub mod layer;
pub mod masking;
pub mod model;
pub mod schedule;
pub mod seeding;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{GradResult, Tape, TensorId};
pub use tensor::Tensor2D;
