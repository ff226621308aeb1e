//! File formats, dataset directories, evaluation reports and the command
//! line for `mmtvae-core`.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
mod error;
pub mod fsio;
pub mod kde_io;
pub mod netpbm;
pub mod records;
pub mod report;
pub mod tables;

pub use error::{Error, Result};
