//! Rotated-robustness defense against bit-flip faults in quantized linear
//! layers, with a bit-level fault-injection suite and a toy-model harness.
//!
//! The pipeline: calibrate per-channel activation peaks, flag outlier
//! channels, build a compact-WY Householder rotation per layer, fuse the
//! inverse rotation into the stored weights offline, and apply the low-rank
//! activation correction online. Orthogonality makes the protected model's
//! clean outputs identical to the baseline while spreading outlier energy so
//! that no single stored bit can be catastrophically amplified.

pub mod attack;
pub mod config;
pub mod container;
pub mod defense;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod quant;
pub mod stats;

pub use error::{Error, Result};
