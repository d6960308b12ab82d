//! Experiment driver for joint variational inference over many measurements.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod pipeline;

pub use config::{DatasetSource, ExperimentConfig, ExperimentKind, ForwardConfig, OperatorSpec};
pub use pipeline::{run, Artifacts, Metrics};
pub use vip_core;

/// Process exit status for an error.
pub fn exit_code(err: &vip_core::Error) -> i32 {
    use vip_core::Error;
    if err.is_numerical() {
        3
    } else {
        match err {
            Error::Io(_) | Error::Format(_) => 1,
            _ => 2,
        }
    }
}
