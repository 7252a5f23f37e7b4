// Indexed loops are the clearer spelling for the dense numeric kernels here.
#![allow(clippy::needless_range_loop)]

//! Structural multi-task learning engine.
//!
//! The crate learns a multi-task network architecture and its parameters in
//! one training run: tasks start as disjoint single-task chains, a CKA
//! regularizer aligns their layerwise representations, locally similar task
//! layers are grouped and fused into averaged group layers via attention
//! based knowledge amalgamation, and the redundant task layers are removed.
//!
//! Module map:
//! - [`tensor`]: dense f64 tensors, the reverse-mode tape, and Adam.
//! - [`similarity`]: CKA scores and the partition search over task sets.
//! - [`archgraph`]: the mutable node/branch/head network and its surgery.
//! - [`losses`]: the composite task loss and the amalgamation loss.
//! - [`trainer`]: the alternating task/structural phase machine.
//! - [`metrics`]: multi-task performance deltas.
//! - [`data`]: synthetic multi-task datasets and CSV persistence.

pub mod archgraph;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod similarity;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{AdamState, Tape, Tensor, Var};
