//! Library side of the `trajguide` command: spec parsing, run orchestration
//! and artifact writing.

pub mod commands;
pub mod render;
pub mod spec;

pub use spec::{prepare, Prepared, RunSpec, SchemaError};
