//! File formats, checkpoints, benchmarks and the `pincer` command line on
//! top of `pincer-core`.

pub mod archive;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
mod error;
pub mod lock;
pub mod manifest;
pub mod metrics;
pub mod store_file;

pub use error::{exit_code, Error, Result};
