#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anomaly;
pub mod cli;
pub mod config;
pub mod error;
pub mod explain;
pub mod granger;
pub mod graph;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
mod serde_inf;
pub mod synth;

pub use error::Error;
