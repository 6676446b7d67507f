//! Command-line front end for crfkit: CoNLL input, evaluation metrics and a
//! gradient-evaluation benchmark.

pub mod app;
pub mod bench;
pub mod conll;
pub mod eval;

pub use app::{run, Cli, CliError};
