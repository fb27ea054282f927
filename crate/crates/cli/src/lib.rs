//! Library side of the command-line interface: configuration schema,
//! loading, and dotted-path overrides. The binary in `main.rs` is a thin
//! wrapper over this plus the core crate.

pub mod config;
