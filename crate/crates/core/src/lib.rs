//! Stationary-point embeddings of dense feedforward networks and the
//! incremental training algorithm built on them.

// `!(x > 0.0)` rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod ita;
pub mod model_io;
pub mod network;
pub mod optimizer;
pub mod stationarity;

pub use error::{Error, Result};
