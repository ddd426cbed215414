//! Autoregressive and step-unrolled diffusion language modeling on a single
//! decoder-only transformer, with the tooling to train, decode and evaluate.

// Negated float comparisons are how NaN gets rejected in validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod decode;
pub mod error;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod train;

pub use error::{Error, Result};
