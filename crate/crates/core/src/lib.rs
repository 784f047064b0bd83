//! Value-reordered state-space scanning for underwater image enhancement.
//!
//! The crate provides a small f64 tensor core with reverse-mode
//! differentiation, the value-priority scan and its guidance loss, the
//! Mamba-Conv mixer block and cross-feature bridge, and a U-Net assembly
//! with a seeded synthetic-degradation training harness. Everything runs
//! single-threaded and bitwise deterministically.

pub mod check;
pub mod error;
pub mod mvgl;
pub mod ops;
pub mod param;
pub mod scan;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor4;
