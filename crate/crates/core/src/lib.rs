//! Conditional random fields: linear-chain and general factor-graph models,
//! exact and approximate inference, and likelihood-based training.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod chain;
pub mod error;
pub mod features;
pub mod graph;
pub mod inference;
pub mod logspace;
pub mod models;
pub mod objectives;
pub mod optimize;
pub mod synth;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;

pub use error::{Error, Result};
