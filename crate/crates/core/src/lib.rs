//! Kernel gradient descent regression with data-driven choice of the iteration
//! count.
//!
//! The crate is organised bottom-up: [`kernel`] builds Gram matrices, [`spectral`]
//! derives effective dimensions and the variance/concentration proxies from their
//! eigenvalues, [`kgd`] runs the iteration and records increment norms, and
//! [`selectors`] turns a recorded run into a stopping time. [`datagen`] and
//! [`metrics`] support the benchmark harness.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod error;
pub mod kernel;
pub mod kgd;
pub mod metrics;
pub mod selectors;
pub mod spectral;

#[cfg(test)]
mod testutil;

pub use error::{KgdError, Result};
