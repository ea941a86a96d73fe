//! Datasets, model files, parallel drivers and the `arbor` command-line tool
//! built on [`arbor_core`].

pub mod artifact;
pub mod cli;
pub mod container;
pub mod data;
mod error;
pub mod parallel;

pub use error::{Error, Result};
