//! Training, evaluation and command-line harness around `clex-core`.

// `!(x >= y)` comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod files;
pub mod report;
pub mod runs;
pub mod synth;
pub mod train;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
pub use report::{EvalReport, EvalRow};
