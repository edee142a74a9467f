//! Heterogeneous graph attention over pixel, scale, and RoI relation graphs,
//! wired into a two-stage reasoning detector with a shared box head, trained
//! and evaluated on deterministic synthetic scenes.
//!
//! Layout:
//! - [`tensor`]: f64 tensors, operation recording, reverse-mode gradients,
//!   finite-difference checking.
//! - [`geometry`]: boxes, IoU, delta coding, bilinear RoI pooling, pyramid
//!   level assignment.
//! - [`graphs`]: fully-connected relation graphs with semantic + spatial
//!   edge attributes.
//! - [`gam`]: edge-MLP attention, temperature softmax, residual aggregation,
//!   fusion layer.
//! - [`detector`]: pyramid backbone, the two reasoning stages, joint loss,
//!   training loop, inference.
//! - [`synth`]: reproducible synthetic scenes and proposal sampling.
//! - [`eval`]: greedy matching, average precision, frequency regression,
//!   parameter counting.
//! - [`runcfg`] / [`checkpoint`] / [`dumps`]: on-disk formats.

pub mod checkpoint;
pub mod checks;
pub mod detector;
pub mod dumps;
pub mod error;
pub mod eval;
pub mod gam;
pub mod geometry;
pub mod graphs;
pub mod runcfg;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{grad_check, Tape, Tensor, Var};
