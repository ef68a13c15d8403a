//! Operator surface for the multiscale image model: configuration,
//! checkpointing, and the train/sample/eval/verify/bench commands.

pub mod commands;
pub mod config;

use pyrpix_core::Error;

/// Process exit codes: 0 ok, 1 verification failure, 2 usage error,
/// 3 runtime error.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Geometry(_)
        | Error::Dimension(_)
        | Error::Index(_)
        | Error::Parse { .. }
        | Error::EmptyDataset => 2,
        Error::Io(_)
        | Error::NonFinite { .. }
        | Error::Checkpoint(_)
        | Error::EnumerationBound(_) => 3,
    }
}
