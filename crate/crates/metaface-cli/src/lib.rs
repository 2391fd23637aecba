//! Library surface of the workbench: configuration, commands, checkpoint
//! format, and the run-directory lock. The `metaface` binary is a thin
//! argument-parsing shell over these modules; integration tests drive them
//! directly.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod lock;
