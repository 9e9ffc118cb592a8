//! Determinant-free training and evaluation of invertible flow models.
//!
//! The crate bundles a small reverse-mode differentiation engine
//! (`diffcore`), two-sample training objectives (`losses`), three flow
//! architectures with exact inversion and log-likelihood (`flows`),
//! Adam-based optimization loops (`training`), evaluation metrics
//! (`metrics`), and dataset handling (`data`). The `eflow` binary wires
//! these together behind a key=value config file.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod flows;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
