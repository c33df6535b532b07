//! Operational shell: configuration files, run pipeline, trace files,
//! sweeps and reports.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod sweep;
pub mod trace_file;

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_REGIME: i32 = 5;
pub const EXIT_INCONCLUSIVE: i32 = 6;

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Shape(_) | Error::Mode(_) => EXIT_CONFIG,
        Error::Io(_) | Error::Parse(_) => EXIT_IO,
        Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::Regime(_) => EXIT_REGIME,
        Error::Inconclusive(_) => EXIT_INCONCLUSIVE,
    }
}
