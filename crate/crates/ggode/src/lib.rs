//! File formats, run directories and the command-line driver around
//! `ggode-core`.

pub mod checkpoint;
pub mod cli;
pub mod container;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod run;

pub use error::{Error, Result};
