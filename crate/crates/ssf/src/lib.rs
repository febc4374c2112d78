//! IO and tooling companion to `ssf-core`: binary frame-pair / weight /
//! flow formats, a synthetic scene generator, run configuration, metric
//! reports and the pipeline glue behind the `ssf` command-line tool.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod sffp;
pub mod ssfl;
pub mod ssfw;
pub mod synth;

pub use error::{IoError, Result};
