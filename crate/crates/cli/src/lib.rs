//! Data generation, training, evaluation, inference and gradient checks for
//! HTMNet, exposed as a library so the `htmnet` binary stays thin.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod optim;
pub mod train;

pub use commands::UsageError;
pub use config::{ConfigError, Precision, RunConfig};
