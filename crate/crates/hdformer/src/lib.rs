//! File formats, experiment configuration, threaded execution and the
//! subcommand implementations behind the `hdformer` binary.

pub mod config;
pub mod error;
pub mod exec;
pub mod io;
pub mod pipeline;
pub mod report;

pub use error::{CliError, Result};

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "HDFORMER_OUT_DIR";
