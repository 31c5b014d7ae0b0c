//! The `pso` command-line pipeline: configuration handling, file formats,
//! run manifests, the calibration pipeline and its baseline file.

pub mod baseline;
pub mod cli;
pub mod commands;
pub mod io;
pub mod manifest;
pub mod pipeline;

pub use commands::{run, Outcome};
