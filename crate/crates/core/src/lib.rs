//! Structured diffusion bridges on a synthetic content-style benchmark.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bridge;
pub mod denoiser;
pub mod diffcore;
pub mod engine;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod objectives;
pub mod synthgen;

pub use error::{Error, Result};
