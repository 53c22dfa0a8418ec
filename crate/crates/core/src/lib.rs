//! Jacobi fixed-point decoding for a tiny action-token transformer, with
//! consistency distillation, mixed-label supervision, early-exit decoding and
//! a benchmark harness.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod config;
pub mod dataset;
pub mod decoding;
pub mod distill;
pub mod error;
pub mod math;
pub mod model;
pub mod task;
pub mod vocab;

pub use error::{Error, Result};
pub use vocab::{TokenId, TokenSequence};

/// Worker-thread cap from `JF_THREADS` (default 1).
pub fn worker_threads() -> Result<usize> {
    match std::env::var("JF_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(t) if t >= 1 => Ok(t),
            _ => Err(Error::Config(format!("JF_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(1),
    }
}
