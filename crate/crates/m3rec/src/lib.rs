//! Files, configuration and the command-line pipeline around
//! [`m3rec_core`]: trajectory logs, session-log ingestion, checkpoints,
//! metrics and reports.

pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;
pub mod ingest;
pub mod logs;
pub mod report;

pub use error::{Error, Result};
