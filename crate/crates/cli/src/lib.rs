//! Pipeline orchestration, bundle format, bundle server and reports for the
//! `layertour` command line tool.

pub mod bundle;
pub mod config;
pub mod demo;
pub mod error;
pub mod hashing;
pub mod pipeline;
pub mod report;
pub mod server;

pub use error::{PipelineError, Result};
